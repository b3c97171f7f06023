"""
Tiny decoder-only transformer with an LM head (feedback generation) and a
scoring head (regression or grade-bin classification).

Layout per block (pre-norm):

    x = x + Wo(attention(LN1(x)))        causal, n_heads heads
    x = x + W2(gelu(W1(LN2(x))))         hidden width MLP_EXPANSION * d_model

followed by a final LN and the head. Token and learned positional
embeddings are summed at the input. Every weight matrix and embedding is
drawn from N(0, INIT_STD^2); biases and norm offsets start at 0, norm gains
at 1. The regression head starts at exactly zero so a fresh scorer outputs
sigmoid(0) = 0.5.
"""

import logging
import math

import numpy as np

import autodiff as ad
from autodiff import Tensor
from config import INIT_STD, LAYER_NORM_EPS, MLP_EXPANSION, ModelConfig
from errors import (
    EmptyInput,
    LengthMismatch,
    SequenceTooLong,
    TargetOutOfRange,
    TokenOutOfRange,
    WrongHead,
)
from lora import BLOCK_LINEARS, Linear, QLoraLinear, model_parameter_counts, prepare_qlora, trainable_fraction

logger = logging.getLogger(__name__)

PAD_ID = 0
MASK_VALUE = -1e9  # Added to attention scores above the diagonal; exp() underflows to exactly 0

# Parameter groups each fine-tuning mode trains. 'base' (frozen biases of
# QLoraLinear layers) is never trained.
TUNE_GROUPS = {
    'full': frozenset({'embedding', 'norm', 'block', 'adapter', 'head'}),
    'lora': frozenset({'adapter', 'norm', 'head'}),
    'heads': frozenset({'embedding', 'norm', 'head'}),
}


def _normal(rng, shape):
    return Tensor(rng.normal(0.0, INIT_STD, size=shape))


def _linear(rng, d_in, d_out):
    return Linear(_normal(rng, (d_out, d_in)), Tensor(np.zeros(d_out)))


class Block:
    """One pre-norm transformer block: causal self-attention then GELU MLP."""

    def __init__(self, rng, d_model, n_heads):
        hidden = MLP_EXPANSION * d_model
        self.n_heads = n_heads
        self.ln1_gain = Tensor(np.ones(d_model))
        self.ln1_bias = Tensor(np.zeros(d_model))
        self.wq = _linear(rng, d_model, d_model)
        self.wk = _linear(rng, d_model, d_model)
        self.wv = _linear(rng, d_model, d_model)
        self.wo = _linear(rng, d_model, d_model)
        self.ln2_gain = Tensor(np.ones(d_model))
        self.ln2_bias = Tensor(np.zeros(d_model))
        self.w1 = _linear(rng, d_model, hidden)
        self.w2 = _linear(rng, hidden, d_model)

    def linears(self):
        return [(name, getattr(self, name)) for name in BLOCK_LINEARS]

    def attention(self, h, mask):
        seq_len, d_model = h.shape
        head_dim = d_model // self.n_heads

        def split_heads(x):
            # [T, d] -> [heads, T, head_dim]
            return ad.transpose(ad.reshape(x, (seq_len, self.n_heads, head_dim)), (1, 0, 2))

        q = split_heads(self.wq(h))
        k = split_heads(self.wk(h))
        v = split_heads(self.wv(h))
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(head_dim))
        weights = ad.softmax_rows(ad.add(scores, mask))
        merged = ad.transpose(ad.matmul(weights, v), (1, 0, 2))
        return self.wo(ad.reshape(merged, (seq_len, d_model)))

    def __call__(self, x, mask):
        h = ad.layer_norm(x, self.ln1_gain, self.ln1_bias, LAYER_NORM_EPS)
        x = ad.add(x, self.attention(h, mask))
        h = ad.layer_norm(x, self.ln2_gain, self.ln2_bias, LAYER_NORM_EPS)
        return ad.add(x, self.w2(ad.gelu(self.w1(h))))


class Model:
    def __init__(self, config: ModelConfig, rng):
        d = config.d_model
        self.config = config
        self.tok_emb = _normal(rng, (config.vocab_size, d))
        self.pos_emb = _normal(rng, (config.max_seq_len, d))
        self.blocks = [Block(rng, d, config.n_heads) for _ in range(config.n_layers)]
        self.lnf_gain = Tensor(np.ones(d))
        self.lnf_bias = Tensor(np.zeros(d))
        if config.head_kind == 'lm':
            self.head = _linear(rng, d, config.vocab_size)
        elif config.head_kind == 'classification':
            self.head = _linear(rng, d, config.n_classes)
        else:
            self.head = Linear(Tensor(np.zeros((1, d))), Tensor(np.zeros(1)))

    def named_parameters(self):
        """
        Every Tensor the model owns, in declaration order, as
        (name, tensor, group) triples. Frozen base matrices of QLoraLinear
        layers are not Tensors and are not listed.
        """
        params = [
            ('tok_emb', self.tok_emb, 'embedding'),
            ('pos_emb', self.pos_emb, 'embedding'),
        ]
        for i, block in enumerate(self.blocks):
            prefix = f'blocks.{i}'
            params.append((f'{prefix}.ln1_gain', block.ln1_gain, 'norm'))
            params.append((f'{prefix}.ln1_bias', block.ln1_bias, 'norm'))
            for name, layer in block.linears():
                if isinstance(layer, QLoraLinear):
                    if layer.bias is not None:
                        params.append((f'{prefix}.{name}.bias', layer.bias, 'base'))
                    if layer.adapter is not None:
                        params.append((f'{prefix}.{name}.lora_A', layer.adapter.A, 'adapter'))
                        params.append((f'{prefix}.{name}.lora_B', layer.adapter.B, 'adapter'))
                else:
                    params.append((f'{prefix}.{name}.weight', layer.weight, 'block'))
                    params.append((f'{prefix}.{name}.bias', layer.bias, 'block'))
            params.append((f'{prefix}.ln2_gain', block.ln2_gain, 'norm'))
            params.append((f'{prefix}.ln2_bias', block.ln2_bias, 'norm'))
        params.append(('lnf_gain', self.lnf_gain, 'norm'))
        params.append(('lnf_bias', self.lnf_bias, 'norm'))
        params.append(('head.weight', self.head.weight, 'head'))
        params.append(('head.bias', self.head.bias, 'head'))
        return params

    def parameters(self):
        return [tensor for _, tensor, _ in self.named_parameters()]

    def trainable_parameters(self):
        return [tensor for _, tensor, _ in self.named_parameters() if tensor.requires_grad]

    def apply_tune(self, tune):
        groups = TUNE_GROUPS[tune]
        for _, tensor, group in self.named_parameters():
            tensor.requires_grad = group in groups

    def parameter_counts(self):
        """(trainable, total); frozen base matrices count toward the total."""
        trainable = sum(t.size for t in self.trainable_parameters())
        total = sum(t.size for t in self.parameters())
        for block in self.blocks:
            for _, layer in block.linears():
                if isinstance(layer, QLoraLinear):
                    total += layer.d_out * layer.d_in
        return trainable, total

    def zero_grad(self):
        for tensor in self.parameters():
            tensor.zero_grad()


def build_model(config: ModelConfig, seed):
    """
    Initialise a model deterministically from `seed`.

    With quantize_base (or tune in {lora, heads}) every block projection is
    frozen into a QLoraLinear; see lora.prepare_qlora.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    model = Model(config, rng)
    if config.tune == 'full':
        model.apply_tune('full')
    else:
        prepare_qlora(
            model, config.tune, config.quantize_base, config.lora_rank, config.lora_alpha, seed,
            bits=config.quant_bits, block_size=config.quant_block_size,
        )
    trainable, total = model_parameter_counts(model)
    logger.info("Built %s model: %d parameters, %d trainable (%.4f)",
                config.head_kind, total, trainable, trainable_fraction(model))
    return model


# ==============================================================================
# FORWARD PASSES
# ==============================================================================

def _check_ids(model, token_ids):
    ids = [int(t) for t in token_ids]
    if not ids:
        raise EmptyInput("token sequence is empty")
    if len(ids) > model.config.max_seq_len:
        raise SequenceTooLong(f"sequence of {len(ids)} tokens exceeds max_seq_len {model.config.max_seq_len}")
    vocab_size = model.config.vocab_size
    for t in ids:
        if not 0 <= t < vocab_size:
            raise TokenOutOfRange(f"token id {t} outside [0, {vocab_size})")
    return ids


def causal_mask(n_heads, seq_len):
    upper = np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)
    mask = np.where(upper, MASK_VALUE, 0.0)
    return Tensor(np.broadcast_to(mask, (n_heads, seq_len, seq_len)).copy())


def hidden_states(model, token_ids):
    """Final-norm hidden states, [T, d_model]."""
    ids = _check_ids(model, token_ids)
    x = ad.add(ad.take_rows(model.tok_emb, ids), ad.take_rows(model.pos_emb, range(len(ids))))
    if model.blocks:
        mask = causal_mask(model.config.n_heads, len(ids))
        for block in model.blocks:
            x = block(x, mask)
    return ad.layer_norm(x, model.lnf_gain, model.lnf_bias, LAYER_NORM_EPS)


def _require_head(model, kind):
    if model.config.head_kind != kind:
        raise WrongHead(f"operation needs a {kind} head, model has {model.config.head_kind}")


def forward_lm(model, token_ids):
    """Next-token logits at every position, [T, vocab_size]."""
    _require_head(model, 'lm')
    return model.head(hidden_states(model, token_ids))


def _strip_padding(token_ids):
    ids = list(token_ids)
    while ids and int(ids[-1]) == PAD_ID:
        ids.pop()
    if not ids:
        raise EmptyInput("sequence holds only padding")
    return ids


def _pooled(model, token_ids):
    ids = _strip_padding(token_ids)
    hidden = hidden_states(model, ids)
    return ad.take_rows(hidden, [len(ids) - 1])


def score_tensor(model, token_ids):
    """Differentiable regression score, shape (1,)."""
    _require_head(model, 'regression')
    return ad.sigmoid(ad.reshape(model.head(_pooled(model, token_ids)), (1,)))


def forward_score(model, token_ids):
    """
    Grade in (0, 1): sigmoid(w . h_last + b), pooled at the last non-pad token.

    Trailing pad tokens are dropped before the forward pass, so appending
    them never changes the score.
    """
    with ad.no_grad():
        return score_tensor(model, token_ids).item()


def forward_class(model, token_ids):
    """Grade-bin logits at the last non-pad token, shape (n_classes,)."""
    _require_head(model, 'classification')
    return ad.reshape(model.head(_pooled(model, token_ids)), (model.config.n_classes,))


def grade_bin(score, n_classes):
    """
    Class index of a normalized score: round-half-away(score * (n_classes - 1)).

    Example:
        >>> grade_bin(0.75, 11)     # 3.75 on the 0-5 scale -> bin 8 (4.0)
        8
    """
    if not 0.0 <= score <= 1.0:
        raise TargetOutOfRange(f"score {score} outside [0, 1]")
    return int(math.floor(score * (n_classes - 1) + 0.5))


def predicted_score(model, token_ids):
    """Normalized grade from either scoring head; classification returns argmax / (C - 1)."""
    if model.config.head_kind == 'classification':
        with ad.no_grad():
            logits = forward_class(model, token_ids).data
        return int(np.argmax(logits)) / (model.config.n_classes - 1)
    return forward_score(model, token_ids)


# ==============================================================================
# OBJECTIVES
# ==============================================================================

def cross_entropy(logits, targets):
    """
    Mean negative log-likelihood of integer targets under softmax(logits).

        L = -(1/N) sum_n log p[n, targets[n]]

    Log-sum-exp stabilised; the gradient at the logits is (p - y) / N.

    Example:
        >>> cross_entropy(tensor_create([1, 2], [0, 0]), [0]).item()   # ln 2
        0.6931471805599453
    """
    if logits.data.ndim != 2:
        raise LengthMismatch(f"logits must be [N, C], got {logits.shape}")
    n, n_classes = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size != n:
        raise LengthMismatch(f"{targets.size} targets for {n} rows of logits")
    if targets.min() < 0 or targets.max() >= n_classes:
        raise TargetOutOfRange(f"targets must lie in [0, {n_classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = -log_probs[rows, targets].sum() / n

    def grad_fn(g):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (grad * (g[0] / n),)

    return ad.record_op('cross_entropy', np.array([loss]), (logits,), grad_fn)


def _check_pairs(preds, targets):
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if preds.size != targets.size:
        raise LengthMismatch(f"{preds.size} predictions for {targets.size} targets")
    if preds.size == 0:
        raise EmptyInput("need at least one prediction")
    return preds, targets


def mse_loss(preds, targets):
    preds, targets = _check_pairs(preds, targets)
    return float(np.mean((preds - targets) ** 2))


def mse_tensor(preds, targets):
    """Differentiable MSE of a prediction Tensor against plain targets."""
    _, target_values = _check_pairs(preds.data, targets)
    diff = ad.sub(preds, Tensor(target_values.reshape(preds.shape)))
    return ad.mean_all(ad.mul(diff, diff))


# ==============================================================================
# DECODING
# ==============================================================================

def _softmax(values):
    shifted = values - values.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def generate(model, prompt_ids, decode):
    """
    Extend `prompt_ids` one token at a time until `decode.stop_id` (which is
    kept), `decode.max_new_tokens` new tokens, or max_seq_len total.

    'greedy' takes the argmax; 'sample' draws from softmax(logits / T)
    with a generator seeded from `decode.seed`.
    """
    _require_head(model, 'lm')
    ids = _check_ids(model, prompt_ids)
    decode.validate()
    rng = np.random.default_rng(decode.seed) if decode.mode == 'sample' else None
    limit = model.config.max_seq_len
    with ad.no_grad():
        for _ in range(decode.max_new_tokens):
            if len(ids) >= limit:
                break
            logits = forward_lm(model, ids).data[-1]
            if rng is None:
                token = int(np.argmax(logits))
            else:
                token = int(rng.choice(logits.size, p=_softmax(logits / decode.temperature)))
            ids.append(token)
            if token == decode.stop_id:
                break
    return ids
