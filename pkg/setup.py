from setuptools import setup, find_packages

install_requires = [
    'filelock',
    'numba',
    'numpy',
    'pandas',
    'pyyaml',
    'sacred',
    'scikit-learn',
    'scipy',
    'tabulate',
    'tinydb',
    'tinydb-serialization',
    'torch<2.13',  # torchtyping relies on named tensors (Tensor.names), removed in torch 2.13
    'torchtyping',
    'tqdm',
    'typeguard<3',
]

setup(
    name='sparse3d',
    version='1.0.0',
    description='Kernel group structured pruning and sparse compilation of 3D CNNs on CPUs',
    packages=find_packages(exclude=['tests', 'experiments']),
    install_requires=install_requires,
    entry_points={'console_scripts': ['sparse3d=sparse3d.cli:main']},
    zip_safe=False,
    include_package_data=True
)
