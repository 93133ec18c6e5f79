"""Toy models: an MLP and a tiny decoder-only transformer.

Initialization (fixed so runs are reproducible from a seed; draws happen
in registry order):

  weight matrices   scaled uniform U(-a, a), a = sqrt(6 / (fan_in + fan_out))
  biases            zero
  layer-norm        gain 1, bias 0
  embeddings        U(-a, a), a = sqrt(3 / d_model)   (variance 1/d_model)

Models here are freshly initialized; a "pretrained" starting point is
produced by a short vanilla training phase (see the harness warm phase).
"""

import numpy as np

from gradmask import tensor as T
from gradmask.tensor import Tensor

PARAM_GROUPS = ("weight", "bias", "norm", "embedding")
ACTIVATIONS = {"relu": T.relu, "gelu": T.gelu, "tanh": T.tanh}
LOSS_KINDS = ("mse", "ce", "ce_lm", "ce_last")


class ParamRegistry:
    """Named, ordered collection of trainable parameter tensors."""

    def __init__(self):
        self._entries = []
        self._by_name = {}

    def add(self, name, tensor, group):
        if name in self._by_name:
            raise ValueError(f"duplicate parameter name {name!r}")
        if " " in name:
            raise ValueError(f"parameter name {name!r} may not contain spaces")
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        tensor.requires_grad = True
        self._entries.append((name, tensor, group))
        self._by_name[name] = tensor
        return tensor

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self):
        return [name for name, _, _ in self._entries]

    def get(self, name):
        return self._by_name[name]

    def total_params(self):
        return sum(t.size for _, t, _ in self._entries)

    def name_shape_map(self):
        return {name: t.shape for name, t, _ in self._entries}

    def zero_grads(self):
        for _, t, _ in self._entries:
            t.zero_grad()

    def grads(self):
        """Copies of the current grad buffers, keyed by name."""
        return {name: t.grad.copy() for name, t, _ in self._entries}

    def snapshot(self):
        """Copies of the current values, keyed by name."""
        return {name: t.values.copy() for name, t, _ in self._entries}

    def load_values(self, values):
        for name, t, _ in self._entries:
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {t.shape}")
            t.values[...] = arr


def _glorot(rng, fan_in, fan_out, shape):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class MLP:
    """Fully connected network; hidden activations, linear final layer."""

    def __init__(self, layer_sizes, activation="gelu", seed=0, loss_kind="mse"):
        layer_sizes = [int(s) for s in layer_sizes]
        if len(layer_sizes) < 2:
            raise ValueError("MLP needs at least two layer sizes (input, output)")
        if any(s < 1 for s in layer_sizes):
            raise ValueError(f"zero-width layer in {layer_sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
        if loss_kind not in ("mse", "ce"):
            raise ValueError(f"MLP supports loss kinds 'mse'/'ce', got {loss_kind!r}")
        self.layer_sizes = layer_sizes
        self.activation = activation
        self.seed = seed
        self.loss_kind = loss_kind
        self.registry = ParamRegistry()
        rng = np.random.default_rng(seed)
        for i, (fi, fo) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            self.registry.add(f"layers.{i}.weight", Tensor(_glorot(rng, fi, fo, (fi, fo))), "weight")
            self.registry.add(f"layers.{i}.bias", Tensor(np.zeros(fo)), "bias")

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    def forward(self, x):
        """x: float array (batch, in_dim) -> Tensor (batch, out_dim)."""
        x = np.asarray(x, dtype=np.float64)
        act = ACTIVATIONS[self.activation]
        h = Tensor(x)
        for i in range(self.n_layers):
            w = self.registry.get(f"layers.{i}.weight")
            b = self.registry.get(f"layers.{i}.bias")
            h = T.add(T.matmul(h, w), b)
            if i < self.n_layers - 1:
                h = act(h)
        return h

    def loss(self, inputs, targets):
        out = self.forward(inputs)
        if self.loss_kind == "mse":
            return T.mse(out, Tensor(np.asarray(targets, dtype=np.float64)))
        return T.cross_entropy(out, targets)

    def metric(self, inputs, targets):
        """Task metric: accuracy for 'ce', MSE for 'mse' (lower is better)."""
        out = self.forward(inputs).values
        if self.loss_kind == "mse":
            d = out - np.asarray(targets, dtype=np.float64)
            return float(np.mean(d * d))
        pred = out.argmax(axis=-1)
        return float(np.mean(pred == np.asarray(targets).reshape(pred.shape)))


class TinyTransformer:
    """Decoder-only transformer with learned positional embeddings.

    Parameter count for vocab V, width C, L layers, context N:
      2*V*C + N*C + L*(12*C*C + 13*C) + 2*C
    (separate q/k/v/out projections with biases, 4x MLP, two layer norms
    per block, final norm, untied output head without bias).
    """

    MASK_FILL = -1e9  # additive causal-mask value; exp() underflows to exactly 0

    def __init__(self, vocab, d_model, n_heads, n_layers, context_len, seed=0,
                 loss_kind="ce_lm"):
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        if loss_kind not in ("ce_lm", "ce_last"):
            raise ValueError(f"TinyTransformer supports 'ce_lm'/'ce_last', got {loss_kind!r}")
        self.vocab = vocab
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.context_len = context_len
        self.seed = seed
        self.loss_kind = loss_kind
        self.registry = ParamRegistry()
        reg = self.registry
        rng = np.random.default_rng(seed)
        c = d_model
        a_emb = np.sqrt(3.0 / c)
        reg.add("tok_emb", Tensor(rng.uniform(-a_emb, a_emb, size=(vocab, c))), "embedding")
        reg.add("pos_emb", Tensor(rng.uniform(-a_emb, a_emb, size=(context_len, c))), "embedding")
        for i in range(n_layers):
            p = f"blocks.{i}"
            reg.add(f"{p}.ln1.gain", Tensor(np.ones(c)), "norm")
            reg.add(f"{p}.ln1.bias", Tensor(np.zeros(c)), "norm")
            for proj in ("q", "k", "v", "o"):
                reg.add(f"{p}.attn.w{proj}", Tensor(_glorot(rng, c, c, (c, c))), "weight")
                reg.add(f"{p}.attn.b{proj}", Tensor(np.zeros(c)), "bias")
            reg.add(f"{p}.ln2.gain", Tensor(np.ones(c)), "norm")
            reg.add(f"{p}.ln2.bias", Tensor(np.zeros(c)), "norm")
            reg.add(f"{p}.mlp.w1", Tensor(_glorot(rng, c, 4 * c, (c, 4 * c))), "weight")
            reg.add(f"{p}.mlp.b1", Tensor(np.zeros(4 * c)), "bias")
            reg.add(f"{p}.mlp.w2", Tensor(_glorot(rng, 4 * c, c, (4 * c, c))), "weight")
            reg.add(f"{p}.mlp.b2", Tensor(np.zeros(c)), "bias")
        reg.add("ln_f.gain", Tensor(np.ones(c)), "norm")
        reg.add("ln_f.bias", Tensor(np.zeros(c)), "norm")
        reg.add("head", Tensor(_glorot(rng, c, vocab, (c, vocab))), "weight")

    def param_count_formula(self):
        v, c, l, n = self.vocab, self.d_model, self.n_layers, self.context_len
        return 2 * v * c + n * c + l * (12 * c * c + 13 * c) + 2 * c

    def _linear(self, x, w, b):
        """(B,T,C) x (C,F) + (F,) -> (B,T,F) via a flattened 2-D matmul."""
        bsz, t, c = x.shape
        h = T.matmul(T.reshape(x, (bsz * t, c)), w)
        h = T.add(h, b)
        return T.reshape(h, (bsz, t, w.shape[1]))

    def forward(self, ids):
        """ids: int array (batch, T), T <= context_len -> logits (batch, T, vocab)."""
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise T.ShapeError(f"transformer input must be (batch, seq), got {ids.shape}")
        bsz, t = ids.shape
        if t > self.context_len:
            raise T.ShapeError(
                f"sequence length {t} exceeds context_len {self.context_len}")
        reg = self.registry
        c, nh = self.d_model, self.n_heads
        hd = c // nh
        x = T.embedding(reg.get("tok_emb"), ids)
        pos = T.embedding(reg.get("pos_emb"), np.arange(t))
        x = T.add(x, pos)  # (T,C) broadcast over batch
        causal = np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, self.MASK_FILL)
        mask = Tensor(causal)
        for i in range(self.n_layers):
            p = f"blocks.{i}"
            h = T.layer_norm(x, reg.get(f"{p}.ln1.gain"), reg.get(f"{p}.ln1.bias"))
            q = self._split_heads(self._linear(h, reg.get(f"{p}.attn.wq"), reg.get(f"{p}.attn.bq")), bsz, t, nh, hd)
            k = self._split_heads(self._linear(h, reg.get(f"{p}.attn.wk"), reg.get(f"{p}.attn.bk")), bsz, t, nh, hd)
            v = self._split_heads(self._linear(h, reg.get(f"{p}.attn.wv"), reg.get(f"{p}.attn.bv")), bsz, t, nh, hd)
            scores = T.scale(T.bmm(q, k, transpose_b=True), 1.0 / np.sqrt(hd))
            probs = T.softmax(T.add(scores, mask))
            ctx = T.bmm(probs, v)  # (B*H, T, hd)
            ctx = T.reshape(ctx, (bsz, nh, t, hd))
            ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (bsz, t, c))
            attn_out = self._linear(ctx, reg.get(f"{p}.attn.wo"), reg.get(f"{p}.attn.bo"))
            x = T.add(x, attn_out)
            h = T.layer_norm(x, reg.get(f"{p}.ln2.gain"), reg.get(f"{p}.ln2.bias"))
            h = self._linear(h, reg.get(f"{p}.mlp.w1"), reg.get(f"{p}.mlp.b1"))
            h = T.gelu(h)
            h = self._linear(h, reg.get(f"{p}.mlp.w2"), reg.get(f"{p}.mlp.b2"))
            x = T.add(x, h)
        x = T.layer_norm(x, reg.get("ln_f.gain"), reg.get("ln_f.bias"))
        logits = T.matmul(T.reshape(x, (bsz * t, c)), reg.get("head"))
        return T.reshape(logits, (bsz, t, self.vocab))

    def _split_heads(self, x, bsz, t, nh, hd):
        """(B,T,C) -> (B*H, T, hd) for per-head batched attention."""
        x = T.reshape(x, (bsz, t, nh, hd))
        x = T.transpose(x, (0, 2, 1, 3))
        return T.reshape(x, (bsz * nh, t, hd))

    def loss(self, inputs, targets):
        logits = self.forward(inputs)
        bsz, t, v = logits.shape
        if self.loss_kind == "ce_lm":
            return T.cross_entropy(logits, targets)
        flat = T.reshape(logits, (bsz * t, v))
        last = T.take_rows(flat, np.arange(bsz) * t + (t - 1))
        return T.cross_entropy(last, targets)

    def metric(self, inputs, targets):
        """Accuracy of the argmax prediction (per token for 'ce_lm')."""
        logits = self.forward(inputs).values
        targets = np.asarray(targets)
        if self.loss_kind == "ce_lm":
            pred = logits.argmax(axis=-1)
            return float(np.mean(pred == targets.reshape(pred.shape)))
        pred = logits[:, -1, :].argmax(axis=-1)
        return float(np.mean(pred == targets.reshape(pred.shape)))


def build_mlp(layer_sizes, activation="gelu", seed=0, loss_kind="mse"):
    """ParamRegistry plus forward function, packaged as an MLP instance."""
    return MLP(layer_sizes, activation=activation, seed=seed, loss_kind=loss_kind)


def build_tiny_transformer(vocab, d_model, n_heads, n_layers, context_len, seed=0,
                           loss_kind="ce_lm"):
    return TinyTransformer(vocab, d_model, n_heads, n_layers, context_len,
                           seed=seed, loss_kind=loss_kind)
