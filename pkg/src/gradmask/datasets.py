"""Deterministic synthetic datasets.

Four generator kinds, all pure functions of (seed, index):

  regression   x ~ U(-1,1)^d, y = teacher_mlp(x) + noise*N(0,1); the teacher
               is a fixed small MLP drawn from a sub-seed, so the target is
               realizable by a student of at least the teacher's size.
  gaussians    two-class points at means +mu/-mu with unit variance; labels
               are the generating component, so the Bayes rule sign(x . mu)
               recovers them up to overlap noise.
  modadd       token pairs (a, b) with target (a+b) mod m; train and eval
               draw from disjoint subsets of the m*m pair table.
  charlm       next-character prediction windows over the embedded corpus
               below; train/eval use disjoint window start offsets.

Train and eval splits never share an example. The same (kind, seed, n)
always yields byte-identical arrays. `variant` selects an independent
fresh draw of the same underlying task (same teacher/pools), which the
harness uses as related warm-phase data.
"""

from dataclasses import dataclass, field

import numpy as np

VALID_KINDS = ("regression", "gaussians", "modadd", "charlm")

# Fixed corpus for the character-level task, shipped in-repo so no download
# is ever needed. Plain original prose; ~2.7 KB.
CORPUS = """\
The harbor wakes before the town does. First the gulls argue over the tide
line, then the winches begin their slow complaint, and by the time the sun
clears the breakwater the quay is already loud with crates and rope. The
boats go out in the same order every morning, oldest hull first, because
that is how it has always been done and nobody remembers deciding it.

Inland, the streets climb in short terraces. Every house keeps a rain
barrel under the downspout, and in summer the children race paper boats in
the gutters after a storm. The baker on the corner stacks loaves in the
window at seven, rye on the left, wheat on the right, and the smell drifts
uphill faster than any bell. People set their clocks by the bread, not the
church.

The workshop at the end of the lane repairs whatever the sea breaks. Nets,
hinges, pump handles, the brass throat of a fog horn: everything waits its
turn on the long bench under the skylight. The repairer keeps a ledger of
work in a narrow hand, one line per job, date and owner and fault and fee.
When the ledger fills, it goes on the shelf beside the others, forty years
of salt damage written down in the same patient ink.

On clear evenings the fishermen spread their charts on the seawall and
argue about the weather with great confidence and no agreement. The wind
does what it wants regardless. A red sky is taken as a promise, a ring
around the moon as a warning, and a still sea as a trick. The oldest of
them says the water keeps its own ledger, and that every borrowed calm is
paid back with interest somewhere down the coast.

Winter shortens the days and lengthens the stories. The harbor master
lights the stove in the office by the pier, and whoever has no urgent work
finds some reason to stand near it. Rope gets spliced that did not need
splicing. The same three storms are retold with the waves a little taller
each year. When spring finally loosens the ice from the moorings, the town
counts its boats twice and paints the numbers fresh on every bow.

The ferry crosses on the hour, eleven minutes over, eleven minutes back,
with three minutes spare at either slip. The pilot reads the current by
the color of the water over the bar and has never once consulted the
printed tide table taped above the wheel. Passengers who ask about it get
the same answer: the table is for the inspector, the water is for the
boat.
"""


@dataclass(frozen=True)
class Split:
    inputs: np.ndarray
    targets: np.ndarray

    @property
    def size(self):
        return self.inputs.shape[0]


@dataclass
class Dataset:
    """A generated task: disjoint train/eval splits plus schema metadata."""

    kind: str
    seed: int
    n: int
    train: Split
    eval: Split
    meta: dict = field(default_factory=dict)


def _teacher(seed):
    from gradmask.models import build_mlp

    return build_mlp([4, 8, 1], activation="tanh", seed=seed)


def _make_regression(seed, n, noise=0.0, variant=0):
    teacher = _teacher(np.random.SeedSequence([seed, 0]).generate_state(1)[0])
    n_eval = max(2, n // 4)

    def draw(stream, count):
        rng = np.random.default_rng([seed, 10 * variant + stream])
        x = rng.uniform(-1.0, 1.0, size=(count, 4))
        y = teacher.forward(x).values.copy()
        if noise > 0.0:
            y = y + noise * rng.standard_normal(y.shape)
        return Split(x, y)

    return Dataset(
        kind="regression", seed=seed, n=n,
        train=draw(1, n), eval=draw(2, n_eval),
        meta={"in_dim": 4, "out_dim": 1, "loss": "mse", "noise": noise,
              "teacher_sizes": [4, 8, 1]},
    )


def _make_gaussians(seed, n, mean=3.0, dim=2, variant=0):
    mu = np.full(dim, mean)
    n_eval = max(2, n // 4)

    def draw(stream, count):
        rng = np.random.default_rng([seed, 10 * variant + stream])
        labels = rng.integers(0, 2, size=count)
        signs = np.where(labels == 1, 1.0, -1.0)
        x = signs[:, None] * mu[None, :] + rng.standard_normal((count, dim))
        return Split(x, labels.astype(np.int64))

    return Dataset(
        kind="gaussians", seed=seed, n=n,
        train=draw(1, n), eval=draw(2, n_eval),
        meta={"in_dim": dim, "n_classes": 2, "loss": "ce", "mu": mu},
    )


def bayes_predict_gaussians(x, mu):
    """Closed-form Bayes rule for the symmetric two-Gaussians task."""
    return (np.asarray(x) @ np.asarray(mu) > 0).astype(np.int64)


def _make_modadd(seed, n, modulus=7, variant=0):
    pairs = np.array([(a, b) for a in range(modulus) for b in range(modulus)],
                     dtype=np.int64)
    rng = np.random.default_rng([seed, 0])
    order = rng.permutation(len(pairs))
    cut = max(1, len(pairs) // 4)
    train_pool, eval_pool = pairs[order[cut:]], pairs[order[:cut]]

    def draw(pool, count, stream):
        rng = np.random.default_rng([seed, 10 * variant + stream])
        x = pool[rng.integers(0, len(pool), size=count)]
        return Split(x, (x[:, 0] + x[:, 1]) % modulus)

    n_eval = max(2, n // 4)
    return Dataset(
        kind="modadd", seed=seed, n=n,
        train=draw(train_pool, n, 1), eval=draw(eval_pool, n_eval, 2),
        meta={"vocab": modulus, "seq_len": 2, "n_classes": modulus,
              "loss": "ce_last", "modulus": modulus},
    )


def _make_charlm(seed, n, context_len=32, variant=0):
    data = np.frombuffer(CORPUS.encode("ascii"), dtype=np.uint8)
    chars = np.unique(data)
    lookup = np.zeros(256, dtype=np.int64)
    lookup[chars] = np.arange(len(chars))
    ids = lookup[data]
    starts = np.arange(len(ids) - context_len)
    rng = np.random.default_rng([seed, 0])
    order = rng.permutation(len(starts))
    cut = max(1, len(starts) // 5)
    train_pool, eval_pool = starts[order[cut:]], starts[order[:cut]]

    def draw(pool, count, stream):
        rng = np.random.default_rng([seed, 10 * variant + stream])
        offs = pool[rng.integers(0, len(pool), size=count)]
        x = np.stack([ids[o:o + context_len] for o in offs])
        y = np.stack([ids[o + 1:o + context_len + 1] for o in offs])
        return Split(x, y)

    n_eval = max(2, n // 4)
    return Dataset(
        kind="charlm", seed=seed, n=n,
        train=draw(train_pool, n, 1), eval=draw(eval_pool, n_eval, 2),
        meta={"vocab": int(len(chars)), "seq_len": context_len, "loss": "ce_lm",
              "context_len": context_len},
    )


def make_dataset(kind, seed, n, **kwargs):
    """Build a deterministic dataset of `n` training examples."""
    if kind not in VALID_KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; valid kinds: {', '.join(VALID_KINDS)}")
    if n < 2:
        raise ValueError(f"dataset needs n >= 2 examples, got {n}")
    builder = {
        "regression": _make_regression,
        "gaussians": _make_gaussians,
        "modadd": _make_modadd,
        "charlm": _make_charlm,
    }[kind]
    return builder(seed, n, **kwargs)


def one_hot_pairs(x, vocab):
    """Encode (n, k) token-id inputs as concatenated one-hot float rows."""
    x = np.asarray(x)
    n, k = x.shape
    out = np.zeros((n, k * vocab), dtype=np.float64)
    rows = np.repeat(np.arange(n), k)
    cols = (np.arange(k) * vocab)[None, :] + x
    out[rows, cols.reshape(-1)] = 1.0
    return out


class BatchStream:
    """Seeded shuffled mini-batches; reshuffles at each epoch boundary."""

    def __init__(self, split, batch_size, seed):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.split = split
        self.batch_size = min(batch_size, split.size)
        self._rng = np.random.default_rng([seed, 777])
        self._order = self._rng.permutation(split.size)
        self._pos = 0

    def next_batch(self):
        if self._pos + self.batch_size > self.split.size:
            self._order = self._rng.permutation(self.split.size)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.split.inputs[idx], self.split.targets[idx]
