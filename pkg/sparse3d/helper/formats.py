"""On-disk formats: the model container (manifest + float32 blob), mask bitset files and raw tensor files.

Model container
---------------
`<stem>.manifest` holds one `key = value` pair per line, `<stem>.bin` the little-endian float32 blob. Offsets and
counts are in float32 elements from the start of the blob; conv weights are stored row-major in the order
(M, N, K_d, K_h, K_w). Keys:

    format = sparse3d-model
    version = 1
    arch, n_classes, input_dims (C D H W), n_layers, hyperparams (JSON)
    layer.<i>.dims (M N K_h K_w K_d), layer.<i>.stride, layer.<i>.padding (d h w)
    layer.<i>.weight_offset, layer.<i>.weight_count, layer.<i>.bias_offset, layer.<i>.bias_count
    classifier.weight_offset, classifier.shape, classifier.bias_offset, classifier.count
    meta.<key> (free-form provenance, e.g. the norm mix alpha)

Mask files
----------
Magic `S3DM`, uint16 version, uint16 layer count; per layer a header `<BIIHHHHHI` (scheme, M, N, K_h, K_w, K_d, g_M,
g_N, bit count) followed by the bits packed with `numpy.packbits` (most significant bit first) in (p, q, d, h, w)
row-major order.

Tensor files
------------
A text header line `# sparse3d-tensor float32 dims <B> <C> <D> <H> <W>` followed by the little-endian float32 values.
"""
import json
import logging
import os
import struct
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from sparse3d.models import MODEL_TYPE, create_model
from sparse3d.sparsity import GroupMask, SchemeKind, bits_shape
from sparse3d.tensor_core import partition

MODEL_FORMAT = 'sparse3d-model'
MODEL_VERSION = 1
MASK_MAGIC = b'S3DM'
MASK_VERSION = 1
MASK_LAYER_HEADER = struct.Struct('<BIIHHHHHI')
SCHEME_CODES = {SchemeKind.FILTER: 0, SchemeKind.VANILLA: 1, SchemeKind.KGS: 2}
TENSOR_HEADER = '# sparse3d-tensor float32 dims'


class FormatError(ValueError):
    """A corrupt or truncated file; `offset` is the byte offset of the first inconsistency."""

    def __init__(self, message: str, offset: int):
        super().__init__(f'{message} (at byte offset {offset})')
        self.offset = offset


def _stem(path: str) -> str:
    root, ext = os.path.splitext(path)
    return root if ext in ('.manifest', '.bin') else path


def _ints(values: Sequence[int]) -> str:
    return ' '.join(str(int(v)) for v in values)


def save_model_container(path: str, model: MODEL_TYPE, meta: Optional[Dict[str, Any]] = None) -> Tuple[str, str]:
    """Writes `<stem>.manifest` and `<stem>.bin`.

    Returns
    -------
    Tuple[str, str]
        Paths of the manifest and the blob.
    """
    stem = _stem(path)
    chunks: List[np.ndarray] = []
    offset = 0

    def append(tensor: Optional[torch.Tensor]) -> Tuple[int, int]:
        nonlocal offset
        if tensor is None:
            return offset, 0
        values = tensor.detach().cpu().numpy().astype('<f4').reshape(-1)
        chunks.append(values)
        start, offset = offset, offset + values.size
        return start, values.size

    hyperparams = model.hyperparams()
    lines = [
        f'format = {MODEL_FORMAT}',
        f'version = {MODEL_VERSION}',
        f'arch = {model.arch}',
        f'n_classes = {model.n_classes}',
        f'input_dims = {_ints(model.input_dims)}',
        f'n_layers = {model.n_layers}',
        f'hyperparams = {json.dumps(hyperparams, sort_keys=True)}',
    ]
    for i, (w, spec) in enumerate(zip(model.conv_weights(), model.conv_specs())):
        w_offset, w_count = append(w.data)
        b_offset, b_count = append(spec.bias)
        lines += [
            f'layer.{i}.dims = {_ints(w.dims)}',
            f'layer.{i}.stride = {_ints(spec.stride)}',
            f'layer.{i}.padding = {_ints(spec.padding)}',
            f'layer.{i}.weight_offset = {w_offset}',
            f'layer.{i}.weight_count = {w_count}',
            f'layer.{i}.bias_offset = {b_offset}',
            f'layer.{i}.bias_count = {b_count}',
        ]
    w_offset, _ = append(model.classifier.weight)
    b_offset, b_count = append(model.classifier.bias)
    lines += [
        f'classifier.weight_offset = {w_offset}',
        f'classifier.shape = {_ints(model.classifier.weight.shape)}',
        f'classifier.bias_offset = {b_offset}',
        f'classifier.count = {b_count}',
    ]
    for key, value in (meta or {}).items():
        lines.append(f'meta.{key} = {json.dumps(value)}')

    with open(f'{stem}.manifest', 'w') as f:
        f.write('\n'.join(lines) + '\n')
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype='<f4')
    blob.tofile(f'{stem}.bin')
    logging.info(f'Saved model container {stem}.manifest ({offset} values)')
    return f'{stem}.manifest', f'{stem}.bin'


def read_manifest(path: str) -> Tuple[Dict[str, str], Dict[str, int]]:
    """Parses the `key = value` lines; also returns the byte offset of every key for diagnostics."""
    entries, offsets = {}, {}
    with open(path, 'rb') as f:
        raw = f.read()
    position = 0
    for line in raw.split(b'\n'):
        text = line.decode('utf-8', errors='replace').strip()
        if text and not text.startswith('#'):
            if '=' not in text:
                raise FormatError(f'Malformed manifest line {text!r} in {path}', position)
            key, value = (part.strip() for part in text.split('=', 1))
            entries[key], offsets[key] = value, position
        position += len(line) + 1
    return entries, offsets


def load_model_container(path: str, return_meta: bool = False):
    """Rebuilds the model from a container written by `save_model_container`.

    Raises
    ------
    FormatError
        If the manifest is malformed or inconsistent with the blob.
    """
    stem = _stem(path)
    manifest_path = f'{stem}.manifest'
    entries, key_offsets = read_manifest(manifest_path)

    def get(key: str) -> str:
        if key not in entries:
            raise FormatError(f'Missing manifest key {key} in {manifest_path}', os.path.getsize(manifest_path))
        return entries[key]

    if get('format') != MODEL_FORMAT or int(get('version')) != MODEL_VERSION:
        raise FormatError(f'Unsupported model container {get("format")} v{get("version")}', key_offsets['format'])

    blob = np.fromfile(f'{stem}.bin', dtype='<f4')
    model = create_model(json.loads(get('hyperparams')))
    if int(get('n_layers')) != model.n_layers:
        raise FormatError(f'Manifest lists {get("n_layers")} layers but the hyperparameters {model.n_layers}',
                          key_offsets['n_layers'])

    def take(offset_key: str, count: int, shape: Sequence[int]) -> torch.Tensor:
        start = int(get(offset_key))
        if count != int(np.prod(shape)):
            raise FormatError(f'{offset_key}: count {count} does not match shape {tuple(shape)}',
                              key_offsets[offset_key])
        if start < 0 or start + count > blob.size:
            raise FormatError(f'{offset_key}: values [{start}, {start + count}) exceed the blob of {blob.size} '
                              f'values', 4 * min(max(start, 0), blob.size))
        return torch.from_numpy(blob[start:start + count].copy()).reshape(*shape)

    with torch.no_grad():
        for i, conv in enumerate(model.convs):
            dims = [int(v) for v in get(f'layer.{i}.dims').split()]
            if dims != [conv.out_channels, conv.in_channels, *conv.kernel_size[1:], conv.kernel_size[0]]:
                raise FormatError(f'layer.{i}.dims {dims} do not match the hyperparameters',
                                  key_offsets[f'layer.{i}.dims'])
            conv.weight.copy_(take(f'layer.{i}.weight_offset', int(get(f'layer.{i}.weight_count')),
                                   conv.weight.shape))
            bias_count = int(get(f'layer.{i}.bias_count'))
            if conv.bias is not None:
                conv.bias.copy_(take(f'layer.{i}.bias_offset', bias_count, conv.bias.shape))
        model.classifier.weight.copy_(take('classifier.weight_offset', int(np.prod(model.classifier.weight.shape)),
                                           [int(v) for v in get('classifier.shape').split()]))
        model.classifier.bias.copy_(take('classifier.bias_offset', int(get('classifier.count')),
                                         model.classifier.bias.shape))

    if return_meta:
        meta = {key[len('meta.'):]: json.loads(value) for key, value in entries.items() if key.startswith('meta.')}
        return model, meta
    return model


def save_masks(path: str, masks: Sequence[GroupMask]):
    with open(path, 'wb') as f:
        f.write(MASK_MAGIC + struct.pack('<HH', MASK_VERSION, len(masks)))
        for mask in masks:
            part = mask.partition
            K_d, K_h, K_w = part.kernel
            bits = mask.bits.cpu().numpy().astype(bool).reshape(-1)
            f.write(MASK_LAYER_HEADER.pack(SCHEME_CODES[mask.scheme], part.M, part.N, K_h, K_w, K_d, part.g_M,
                                           part.g_N, bits.size))
            f.write(np.packbits(bits, bitorder='big').tobytes())


def load_masks(path: str) -> List[GroupMask]:
    """Reads a mask bitset file.

    Raises
    ------
    FormatError
        On a wrong magic/version, an unknown scheme, inconsistent dims or truncation.
    """
    with open(path, 'rb') as f:
        raw = f.read()
    if raw[:4] != MASK_MAGIC:
        raise FormatError(f'Bad mask file magic {raw[:4]!r}', 0)
    if len(raw) < 8:
        raise FormatError('Truncated mask file header', len(raw))
    version, n_layers = struct.unpack_from('<HH', raw, 4)
    if version != MASK_VERSION:
        raise FormatError(f'Unsupported mask file version {version}', 4)
    codes = {code: scheme for scheme, code in SCHEME_CODES.items()}

    masks, offset = [], 8
    for i in range(n_layers):
        if offset + MASK_LAYER_HEADER.size > len(raw):
            raise FormatError(f'Truncated header of mask {i}', len(raw))
        code, M, N, K_h, K_w, K_d, g_M, g_N, n_bits = MASK_LAYER_HEADER.unpack_from(raw, offset)
        if code not in codes:
            raise FormatError(f'Unknown scheme code {code} of mask {i}', offset)
        try:
            part = partition((M, N, K_h, K_w, K_d), g_M, g_N)
        except ValueError as e:
            raise FormatError(f'Invalid dims of mask {i}: {e}', offset + 1)
        offset += MASK_LAYER_HEADER.size
        n_bytes = (n_bits + 7) // 8
        if offset + n_bytes > len(raw):
            raise FormatError(f'Truncated bits of mask {i}', len(raw))
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, count=n_bytes, offset=offset), count=n_bits,
                             bitorder='big').astype(bool)
        try:
            masks.append(GroupMask(codes[code], part,
                                   torch.from_numpy(bits.copy()).reshape(bits_shape(codes[code], part)), i))
        except (ValueError, RuntimeError) as e:
            raise FormatError(f'Bit count {n_bits} of mask {i} does not match its dims: {e}', offset - 4)
        offset += n_bytes
    if offset != len(raw):
        raise FormatError(f'{len(raw) - offset} trailing bytes in mask file', offset)
    return masks


def save_tensor(path: str, tensor: torch.Tensor):
    with open(path, 'wb') as f:
        f.write(f'{TENSOR_HEADER} {_ints(tensor.shape)}\n'.encode('ascii'))
        f.write(tensor.detach().cpu().numpy().astype('<f4').tobytes())


def load_tensor(path: str) -> torch.Tensor:
    with open(path, 'rb') as f:
        raw = f.read()
    end = raw.find(b'\n')
    header = raw[:end].decode('ascii', errors='replace') if end >= 0 else ''
    if not header.startswith(TENSOR_HEADER):
        raise FormatError(f'Missing tensor header {TENSOR_HEADER!r}', 0)
    try:
        dims = [int(v) for v in header[len(TENSOR_HEADER):].split()]
    except ValueError:
        raise FormatError(f'Malformed tensor dims in header {header!r}', len(TENSOR_HEADER))
    expected = 4 * int(np.prod(dims))
    payload = raw[end + 1:]
    if len(payload) != expected:
        raise FormatError(f'Tensor of dims {dims} needs {expected} bytes but {len(payload)} follow the header',
                          end + 1 + min(len(payload), expected))
    return torch.from_numpy(np.frombuffer(payload, dtype='<f4').copy()).reshape(*dims)
