"""
Low-rank adapters over frozen (optionally int4-quantized) base weights.

An adapter learns dW = (alpha / r) * B @ A with A: [r, d_in], B: [d_out, r].
B starts at exactly zero, so an adapted layer reproduces its base layer
bit-for-bit until the first optimizer step.
"""

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

import autodiff as ad
from autodiff import Tensor
from config import LORA_INIT_STD
from errors import InvalidAlpha, InvalidRank, ShapeMismatch
from quantization import QuantizedTensor, dequantize_array, quantize_absmax

logger = logging.getLogger(__name__)

# Block projections that receive adapters: attention query/value and MLP output.
ADAPTER_TARGETS = ('wq', 'wv', 'w2')
BLOCK_LINEARS = ('wq', 'wk', 'wv', 'wo', 'w1', 'w2')


@dataclass(eq=False)
class LoraAdapter:
    A: Tensor
    B: Tensor
    rank: int
    alpha: float
    seed: int

    @property
    def scaling(self):
        return self.alpha / self.rank

    def delta_weight(self):
        """dW = (alpha/r) * B @ A as a plain array, shape [d_out, d_in]."""
        return self.scaling * (self.B.data @ self.A.data)

    def parameters(self):
        return [self.A, self.B]


def lora_init(d_in, d_out, rank, alpha, seed):
    """
    Create an adapter with A ~ N(0, 0.02^2) from `seed` and B = 0.

    Example:
        >>> adapter = lora_init(16, 16, rank=8, alpha=16.0, seed=0)
        >>> float(abs(adapter.B.data).max())
        0.0
    """
    if rank < 1 or rank > min(d_in, d_out):
        raise InvalidRank(f"rank must lie in [1, {min(d_in, d_out)}], got {rank}")
    if not alpha > 0:
        raise InvalidAlpha(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, LORA_INIT_STD, size=(rank, d_in))
    return LoraAdapter(
        A=Tensor(a, requires_grad=True),
        B=Tensor(np.zeros((d_out, rank)), requires_grad=True),
        rank=rank,
        alpha=float(alpha),
        seed=seed,
    )


def lora_merge(w0, adapter):
    """Return W0 + (alpha/r) * B @ A without touching either input."""
    w = w0.data if isinstance(w0, Tensor) else np.asarray(w0, dtype=np.float64)
    expected = (adapter.B.shape[0], adapter.A.shape[1])
    if w.shape != expected:
        raise ShapeMismatch(f"base weight {w.shape} does not match adapter {expected}")
    return Tensor(w + adapter.delta_weight())


# ==============================================================================
# LAYERS
# ==============================================================================

def _as_matrix(x, d_in):
    if x.shape[-1] != d_in:
        raise ShapeMismatch(f"input last dimension {x.shape[-1]} != d_in {d_in}")
    if x.data.ndim == 1:
        return ad.reshape(x, (1, d_in)), True
    if x.data.ndim != 2:
        raise ShapeMismatch(f"linear input must be [d_in] or [batch, d_in], got {x.shape}")
    return x, False


class Linear:
    """Full-precision y = x @ W^T + b; W: [d_out, d_in]."""

    def __init__(self, weight, bias=None):
        self.weight = weight
        self.bias = bias

    @property
    def d_out(self):
        return self.weight.shape[0]

    @property
    def d_in(self):
        return self.weight.shape[1]

    def __call__(self, x):
        matrix, was_vector = _as_matrix(x, self.d_in)
        out = ad.matmul(matrix, ad.transpose(self.weight))
        if self.bias is not None:
            out = ad.add_bias(out, self.bias)
        return ad.reshape(out, (self.d_out,)) if was_vector else out

    def parameters(self):
        return [p for p in (self.weight, self.bias) if p is not None]

    def frozen_elements(self):
        return 0


class QLoraLinear:
    """
    Frozen base (int4/int8 QuantizedTensor, or a frozen fp64 array) plus an
    optional trainable adapter:

        forward(x) = x @ dequantize(base)^T + (alpha/r) * (x @ A^T) @ B^T + bias
    """

    def __init__(self, base: Union[QuantizedTensor, np.ndarray], adapter: Optional[LoraAdapter] = None, bias=None):
        self.base = base
        self.adapter = adapter
        self.bias = bias
        if bias is not None:
            bias.requires_grad = False
        weight = dequantize_array(base) if isinstance(base, QuantizedTensor) else np.array(base, dtype=np.float64)
        self._base_t = Tensor(np.ascontiguousarray(weight.T))
        if adapter is not None and (adapter.B.shape[0], adapter.A.shape[1]) != weight.shape:
            raise ShapeMismatch(f"adapter shape does not match base {weight.shape}")

    @property
    def quantized(self):
        return isinstance(self.base, QuantizedTensor)

    @property
    def d_out(self):
        return self._base_t.shape[1]

    @property
    def d_in(self):
        return self._base_t.shape[0]

    def base_weight(self):
        """The full-precision base weight this layer computes with, [d_out, d_in]."""
        return self._base_t.data.T.copy()

    def __call__(self, x):
        return qlora_forward(self, x)

    def parameters(self):
        return self.adapter.parameters() if self.adapter is not None else []

    def frozen_elements(self):
        count = self.d_out * self.d_in
        return count + (self.bias.size if self.bias is not None else 0)


def qlora_forward(layer, x):
    """
    Dequantized-base matmul plus the adapter path plus bias.

    Gradients reach only the adapter's A and B; the base is a constant.
    """
    matrix, was_vector = _as_matrix(x, layer.d_in)
    out = ad.matmul(matrix, layer._base_t)
    if layer.adapter is not None:
        adapter = layer.adapter
        low = ad.matmul(matrix, ad.transpose(adapter.A))
        update = ad.matmul(low, ad.transpose(adapter.B))
        out = ad.add(out, ad.scale(update, adapter.scaling))
    if layer.bias is not None:
        out = ad.add_bias(out, layer.bias)
    return ad.reshape(out, (layer.d_out,)) if was_vector else out


def to_qlora(linear, quantize, bits, block_size, adapter_spec=None):
    """
    Freeze a Linear into a QLoraLinear.

    Args:
        linear: Linear (or QLoraLinear, returned re-wrapped with a new adapter)
        quantize: store the base as absmax codes instead of fp64
        adapter_spec: (rank, alpha, seed) or None for no adapter
    """
    if isinstance(linear, QLoraLinear):
        weight, bias = linear.base_weight(), linear.bias
        if linear.adapter is not None:
            weight = lora_merge(weight, linear.adapter).data
        keep_codes = quantize and linear.quantized and linear.adapter is None
    else:
        weight, bias = linear.weight.data.copy(), linear.bias
        keep_codes = False
    if keep_codes:
        base = linear.base
    else:
        base = quantize_absmax(weight, bits=bits, block_size=block_size) if quantize else weight
    if bias is not None:
        bias = Tensor(bias.data.copy())
    adapter = None
    if adapter_spec is not None:
        rank, alpha, seed = adapter_spec
        adapter = lora_init(weight.shape[1], weight.shape[0], rank, alpha, seed)
    return QLoraLinear(base, adapter=adapter, bias=bias)


def prepare_qlora(model, tune, quantize, rank, alpha, seed, bits=4, block_size=64):
    """
    Convert a model's block projections to frozen-base layers and set which
    parameters train.

    tune='lora' attaches adapters to ADAPTER_TARGETS; tune='heads' freezes
    every block projection without adapters. tune='full' with quantize is
    rejected by the model config; tune='full' alone leaves the layers as
    they are and only marks everything trainable.
    """
    model.config = dataclasses.replace(
        model.config, tune=tune, quantize_base=quantize, lora_rank=rank, lora_alpha=alpha,
        quant_bits=bits, quant_block_size=block_size,
    ).validate()
    if tune == 'full':
        model.apply_tune(tune)
        return model
    for layer_index, block in enumerate(model.blocks):
        for slot_index, name in enumerate(BLOCK_LINEARS):
            adapter_spec = None
            if tune == 'lora' and name in ADAPTER_TARGETS:
                adapter_spec = (rank, alpha, seed * 1000 + layer_index * 10 + slot_index)
            setattr(block, name, to_qlora(getattr(block, name), quantize, bits, block_size, adapter_spec))
    model.apply_tune(tune)
    logger.info("Prepared %s fine-tuning (quantized base: %s)", tune, quantize)
    return model


def model_parameter_counts(model):
    """(trainable, total) element counts; quantized base elements count as parameters."""
    return model.parameter_counts()


def trainable_fraction(model):
    """
    Fraction of parameters the optimizer updates.

    Example:
        a model with 39 trainable of 1000 total parameters -> 0.039
    """
    trainable, total = model_parameter_counts(model)
    return trainable / total
