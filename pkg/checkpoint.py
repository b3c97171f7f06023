"""
Versioned binary checkpoint format.

    magic  b"QGRD1"
    u16    format version
    u32    section count
    then per section:
        u16 name length, name (UTF-8), u8 kind, u64 payload length, payload

All integers and floats are little-endian. Section kinds:

    TEXT       UTF-8 text (config, vocab, meta)
    ARRAY      u8 ndim, u32 dims..., fp64 values row-major
    QUANTIZED  u8 bits, u32 block size, u8 ndim, u32 dims..., u32 scale count,
               fp64 scales, packed codes (int4: two per byte, low nibble first)
    ADAPTER    u32 rank, f64 alpha, i64 seed, then A and B as ARRAY payloads

Sections follow the model's declaration order, so saving a loaded
checkpoint reproduces the original bytes.
"""

import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from autodiff import Tensor
from config import RunConfig, apply_overrides, parse_config_text
from data import Vocab
from errors import CheckpointFormatError, IncompatibleCheckpoint, QGradeError, ValidationError
from lora import BLOCK_LINEARS, Linear, LoraAdapter, QLoraLinear
from model import build_model
from quantization import QuantizedTensor, pack_codes, unpack_codes

logger = logging.getLogger(__name__)

MAGIC = b"QGRD1"
FORMAT_VERSION = 1

KIND_TEXT = 1
KIND_ARRAY = 2
KIND_QUANTIZED = 3
KIND_ADAPTER = 4
KIND_NAMES = {KIND_TEXT: 'text', KIND_ARRAY: 'array', KIND_QUANTIZED: 'quantized', KIND_ADAPTER: 'adapter'}


@dataclass
class Checkpoint:
    model: object
    vocab: Vocab
    meta: dict = field(default_factory=dict)

    @property
    def task(self):
        return self.meta.get('task', '')


# ==============================================================================
# PAYLOAD CODECS
# ==============================================================================

def _encode_array(array):
    array = np.ascontiguousarray(array, dtype='<f8')
    header = struct.pack('<B', array.ndim) + struct.pack(f'<{array.ndim}I', *array.shape)
    return header + array.tobytes()


class _Reader:
    def __init__(self, payload, name):
        self.payload = payload
        self.offset = 0
        self.name = name

    def take(self, size):
        if self.offset + size > len(self.payload):
            raise CheckpointFormatError(f"section {self.name!r} is truncated")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self):
        (ndim,) = self.unpack('<B')
        shape = self.unpack(f'<{ndim}I')
        count = int(np.prod(shape)) if ndim else 1
        return np.frombuffer(self.take(8 * count), dtype='<f8').astype(np.float64).reshape(shape)

    def done(self):
        if self.offset != len(self.payload):
            raise CheckpointFormatError(f"section {self.name!r} has {len(self.payload) - self.offset} trailing bytes")


def _encode_quantized(q):
    parts = [
        struct.pack('<BI', q.bits, q.block_size),
        struct.pack('<B', len(q.shape)),
        struct.pack(f'<{len(q.shape)}I', *q.shape),
        struct.pack('<I', q.scales.size),
        np.ascontiguousarray(q.scales, dtype='<f8').tobytes(),
        pack_codes(q.codes, q.bits),
    ]
    return b''.join(parts)


def _decode_quantized(reader):
    bits, block_size = reader.unpack('<BI')
    (ndim,) = reader.unpack('<B')
    shape = reader.unpack(f'<{ndim}I')
    (n_scales,) = reader.unpack('<I')
    scales = np.frombuffer(reader.take(8 * n_scales), dtype='<f8').astype(np.float64)
    count = int(np.prod(shape))
    n_bytes = count if bits == 8 else (count + 1) // 2
    try:
        codes = unpack_codes(reader.take(n_bytes), count, bits)
        return QuantizedTensor(codes, scales, bits, block_size, tuple(shape)).validate()
    except QGradeError as exc:
        raise CheckpointFormatError(f"section {reader.name!r}: {exc}") from None


def _encode_adapter(adapter):
    header = struct.pack('<Idq', adapter.rank, adapter.alpha, adapter.seed)
    return header + _encode_array(adapter.A.data) + _encode_array(adapter.B.data)


def _decode_adapter(reader):
    rank, alpha, seed = reader.unpack('<Idq')
    a = reader.array()
    b = reader.array()
    if a.shape[0] != rank or b.shape[1] != rank:
        raise CheckpointFormatError(f"section {reader.name!r}: adapter factors do not have rank {rank}")
    return LoraAdapter(Tensor(a), Tensor(b), rank=rank, alpha=alpha, seed=seed)


def _render_pairs(pairs):
    """`key = value` lines; rejects text that would not read back unchanged."""
    lines = []
    for key, value in pairs:
        key, value = str(key), str(value)
        if not key.strip() or any(ch in key for ch in '#=\n') or any(ch in value for ch in '#\n'):
            raise ValidationError(f"cannot store {key!r} = {value!r}: '#' and newlines are not allowed")
        lines.append(f"{key} = {value}\n")
    return ''.join(lines)


# ==============================================================================
# SAVE
# ==============================================================================

def model_sections(model):
    """(name, kind, payload) for every model array in declaration order."""
    sections = [
        ('tok_emb', KIND_ARRAY, _encode_array(model.tok_emb.data)),
        ('pos_emb', KIND_ARRAY, _encode_array(model.pos_emb.data)),
    ]
    for i, block in enumerate(model.blocks):
        prefix = f'blocks.{i}'
        sections.append((f'{prefix}.ln1_gain', KIND_ARRAY, _encode_array(block.ln1_gain.data)))
        sections.append((f'{prefix}.ln1_bias', KIND_ARRAY, _encode_array(block.ln1_bias.data)))
        for name, layer in block.linears():
            key = f'{prefix}.{name}'
            if isinstance(layer, QLoraLinear):
                if layer.quantized:
                    sections.append((f'{key}.base', KIND_QUANTIZED, _encode_quantized(layer.base)))
                else:
                    sections.append((f'{key}.base', KIND_ARRAY, _encode_array(layer.base)))
                sections.append((f'{key}.bias', KIND_ARRAY, _encode_array(layer.bias.data)))
                if layer.adapter is not None:
                    sections.append((f'{key}.adapter', KIND_ADAPTER, _encode_adapter(layer.adapter)))
            else:
                sections.append((f'{key}.weight', KIND_ARRAY, _encode_array(layer.weight.data)))
                sections.append((f'{key}.bias', KIND_ARRAY, _encode_array(layer.bias.data)))
        sections.append((f'{prefix}.ln2_gain', KIND_ARRAY, _encode_array(block.ln2_gain.data)))
        sections.append((f'{prefix}.ln2_bias', KIND_ARRAY, _encode_array(block.ln2_bias.data)))
    sections.append(('lnf_gain', KIND_ARRAY, _encode_array(model.lnf_gain.data)))
    sections.append(('lnf_bias', KIND_ARRAY, _encode_array(model.lnf_bias.data)))
    sections.append(('head.weight', KIND_ARRAY, _encode_array(model.head.weight.data)))
    sections.append(('head.bias', KIND_ARRAY, _encode_array(model.head.bias.data)))
    return sections


def serialize_checkpoint(model, vocab, meta):
    config_text = _render_pairs(
        (f'model.{key}', value) for key, value in vars(model.config).items()
    )
    meta_text = _render_pairs(sorted(meta.items()))
    sections = [
        ('config', KIND_TEXT, config_text.encode('utf-8')),
        ('vocab', KIND_TEXT, vocab.to_text().encode('utf-8')),
        ('meta', KIND_TEXT, meta_text.encode('utf-8')),
    ] + model_sections(model)
    parts = [MAGIC, struct.pack('<HI', FORMAT_VERSION, len(sections))]
    for name, kind, payload in sections:
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<H', len(encoded)) + encoded)
        parts.append(struct.pack('<BQ', kind, len(payload)))
        parts.append(payload)
    return b''.join(parts)


def save_checkpoint(path, model, vocab, meta):
    """Write atomically: a temp file in the target directory, then rename."""
    data = serialize_checkpoint(model, vocab, meta)
    directory = os.path.dirname(os.path.abspath(path))
    handle = tempfile.NamedTemporaryFile(dir=directory, prefix='.qgrade-', suffix='.tmp', delete=False)
    try:
        with handle:
            handle.write(data)
        os.replace(handle.name, path)
    except BaseException:
        if os.path.exists(handle.name):
            os.unlink(handle.name)
        raise
    logger.info("Wrote checkpoint %s (%d bytes)", path, len(data))
    return len(data)


# ==============================================================================
# LOAD
# ==============================================================================

def read_sections(data):
    """
    Parse the header and section table.

    Returns:
        (version, [(name, kind, payload), ...])
    """
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic")
    reader = _Reader(data, '<header>')
    reader.take(len(MAGIC))
    version, count = reader.unpack('<HI')
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    sections = []
    for _ in range(count):
        (name_length,) = reader.unpack('<H')
        name = reader.take(name_length).decode('utf-8')
        kind, length = reader.unpack('<BQ')
        if kind not in KIND_NAMES:
            raise CheckpointFormatError(f"section {name!r} has unknown kind {kind}")
        sections.append((name, kind, reader.take(length)))
    reader.done()
    return version, sections


def _text(sections, name):
    if name not in sections or sections[name][0] != KIND_TEXT:
        raise CheckpointFormatError(f"missing text section {name!r}")
    return sections[name][1].decode('utf-8')


def _array_section(sections, name, shape=None):
    if name not in sections:
        raise CheckpointFormatError(f"missing section {name!r}")
    kind, payload = sections[name]
    if kind != KIND_ARRAY:
        raise CheckpointFormatError(f"section {name!r} is {KIND_NAMES[kind]}, expected array")
    reader = _Reader(payload, name)
    array = reader.array()
    reader.done()
    if shape is not None and array.shape != tuple(shape):
        raise CheckpointFormatError(f"section {name!r} has shape {array.shape}, expected {tuple(shape)}")
    return array


def _load_linear(sections, key, bias_template):
    base_entry = sections.get(f'{key}.base')
    bias = Tensor(_array_section(sections, f'{key}.bias', bias_template.shape))
    if base_entry is None:
        return Linear(Tensor(_array_section(sections, f'{key}.weight')), bias)
    kind, payload = base_entry
    reader = _Reader(payload, f'{key}.base')
    base = _decode_quantized(reader) if kind == KIND_QUANTIZED else reader.array()
    reader.done()
    adapter = None
    if f'{key}.adapter' in sections:
        reader = _Reader(sections[f'{key}.adapter'][1], f'{key}.adapter')
        adapter = _decode_adapter(reader)
        reader.done()
    try:
        return QLoraLinear(base, adapter=adapter, bias=bias)
    except QGradeError as exc:
        raise CheckpointFormatError(f"layer {key!r}: {exc}") from None


def parse_checkpoint(data):
    _, table = read_sections(data)
    sections = {name: (kind, payload) for name, kind, payload in table}
    if len(sections) != len(table):
        raise CheckpointFormatError("duplicate section names")
    try:
        run_config = apply_overrides(RunConfig(), parse_config_text(_text(sections, 'config')))
        model_config = run_config.model.validate()
    except QGradeError as exc:
        raise CheckpointFormatError(f"bad config section: {exc}") from None
    vocab = Vocab.from_text(_text(sections, 'vocab'))
    meta = parse_config_text(_text(sections, 'meta'))

    model = build_model(model_config, seed=0)
    for i, block in enumerate(model.blocks):
        for name, layer in block.linears():
            setattr(block, name, _load_linear(sections, f'blocks.{i}.{name}', layer.bias))
    model.apply_tune(model_config.tune)
    for name, tensor, group in model.named_parameters():
        if group == 'adapter':
            continue
        tensor.data = _array_section(sections, name, tensor.shape)
    return Checkpoint(model=model, vocab=vocab, meta=meta)


def load_checkpoint(path):
    with open(path, 'rb') as handle:
        data = handle.read()
    checkpoint = parse_checkpoint(data)
    logger.info("Loaded checkpoint %s (task %s, head %s)", path, checkpoint.task, checkpoint.model.config.head_kind)
    return checkpoint


def require_task(checkpoint, task):
    if checkpoint.task != task:
        raise IncompatibleCheckpoint(f"checkpoint was trained for {checkpoint.task!r}, not {task!r}")


def describe(path):
    """Header summary for `inspect`: version plus (name, kind, bytes) per section."""
    with open(path, 'rb') as handle:
        version, table = read_sections(handle.read())
    return version, [(name, KIND_NAMES[kind], len(payload)) for name, kind, payload in table]
