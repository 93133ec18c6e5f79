"""Experiment orchestration: configs, comparison runs, sweeps, plot data.

Configuration comes from a plain key=value file plus flag overrides (flags
win). Every file-writing command drops a resolved copy of its
configuration beside the outputs, so any CSV row can be re-derived.

Sweep and comparison cells (strategy x ratio x seed) are independent runs;
GMT_THREADS > 1 executes them in a process pool, and results are always
merged in deterministic cell order, never completion order. All CSV
columns are reproducible byte-for-byte across reruns except the
wall-clock-derived ones (throughput, wall_seconds).
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

from gradmask.checkpoint import load_checkpoint, save_checkpoint
from gradmask.datasets import Split, make_dataset, one_hot_pairs
from gradmask.delta import DROP_STRATEGIES, drop_sweep
from gradmask.models import build_mlp, build_tiny_transformer
from gradmask.optim import evaluate, train

# The mask-ratio grid: 10% granularity plus the 95%/99% extremes.
DEFAULT_RATIO_GRID = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99]
DEFAULT_DROP_RATES = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]

TASK_MODELS = {
    "regression": ("mlp",),
    "gaussians": ("mlp",),
    "modadd": ("mlp", "tinytf"),
    "charlm": ("tinytf",),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "regression"
    model: str = "mlp"
    strategy: str = "gmt"
    strategies: list = field(default_factory=lambda: ["none", "gmt", "rmt", "hft"])
    mask_ratio: float = 0.2
    scope: str = "global"
    accum_n: int = 4
    steps: int = 400
    lr: float = 0.01
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out: str = None
    ratios: list = field(default_factory=lambda: list(DEFAULT_RATIO_GRID))
    drop_strategy: str = "trivial"
    drop_rate: float = 0.4
    drop_rates: list = field(default_factory=lambda: list(DEFAULT_DROP_RATES))
    rescale: bool = False
    batch_size: int = 16
    eval_every: int = 0
    optimizer: str = "adam"
    n_examples: int = 512
    warm_steps: int = 0
    warmup_ratio: float = 0.03
    weight_decay: float = 0.0
    masked_mode: str = "skip"
    exempt_groups: list = field(default_factory=list)
    dump_masks: bool = False
    checkpoint_every: int = 0
    noise: float = 0.0
    modulus: int = 7
    context_len: int = 16
    hidden_sizes: list = field(default_factory=lambda: [32])
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2

    @property
    def keep_fraction(self):
        return 1.0 - self.mask_ratio

    def validate(self):
        if self.task not in TASK_MODELS:
            raise ConfigError(f"unknown task {self.task!r}; valid: {sorted(TASK_MODELS)}")
        if self.model not in TASK_MODELS[self.task]:
            raise ConfigError(
                f"model {self.model!r} does not fit task {self.task!r} "
                f"(valid: {TASK_MODELS[self.task]})")
        for s in [self.strategy] + list(self.strategies):
            if s not in ("none", "gmt", "rmt", "hft", "drop"):
                raise ConfigError(f"unknown strategy {s!r}")
        if self.strategy == "drop":
            raise ConfigError("'drop' is a compare-only strategy (post-hoc on the none run)")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.scope not in ("global", "per_tensor"):
            raise ConfigError(f"scope must be global or per-tensor, got {self.scope!r}")
        for name, low in (("accum_n", 1), ("steps", 1), ("batch_size", 1), ("n_examples", 2)):
            if getattr(self, name) < low:
                raise ConfigError(f"{name} must be >= {low}, got {getattr(self, name)}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.drop_strategy not in DROP_STRATEGIES:
            raise ConfigError(f"unknown drop strategy {self.drop_strategy!r}")
        for r in [self.drop_rate] + list(self.drop_rates):
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"drop rate {r} outside [0, 1]")
        for r in self.ratios:
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"mask ratio {r} outside [0, 1)")
        if self.masked_mode not in ("skip", "zero"):
            raise ConfigError(f"masked_mode must be skip or zero, got {self.masked_mode!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.warm_steps < 0:
            raise ConfigError(f"warm_steps must be >= 0, got {self.warm_steps}")
        return self


_LIST_FIELDS = {"strategies", "seeds", "ratios", "drop_rates", "exempt_groups",
                "hidden_sizes"}
_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key, value):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    if isinstance(value, str):
        value = value.strip()
        if key in _LIST_FIELDS:
            parts = [p for p in value.split(",") if p != ""]
            if key in ("seeds", "hidden_sizes"):
                return [int(p) for p in parts]
            if key in ("ratios", "drop_rates"):
                return [float(p) for p in parts]
            return parts
        proto = getattr(ExperimentConfig(), key)
        if isinstance(proto, bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if isinstance(proto, int):
            return int(value)
        if isinstance(proto, float):
            return float(value)
        if value.lower() == "none":
            return None
        return value.replace("-", "_") if key == "scope" else value
    return value


def parse_config_file(path):
    """key=value lines; blank lines and # comments ignored."""
    values = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    return values


def build_config(config_path=None, overrides=None):
    """File values first, then flag overrides; validate the result."""
    merged = {}
    if config_path:
        merged.update(parse_config_file(config_path))
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    cfg = ExperimentConfig()
    for key, value in merged.items():
        setattr(cfg, key, _coerce(key, value))
    return cfg.validate()


def write_resolved_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.resolved")
    with open(path, "w", newline="") as fh:
        for key, value in sorted(asdict(cfg).items()):
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            fh.write(f"{key}={value}\n")
    return path


def fmt(value):
    """CSV field formatting: shortest round-trip repr for floats."""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(row[h]) for h in header) + "\n")
    return path


# ---------------------------------------------------------------------------
# model/data construction


def build_data(cfg, seed, variant=0):
    kwargs = {"variant": variant}
    if cfg.task == "regression":
        kwargs["noise"] = cfg.noise
    elif cfg.task == "modadd":
        kwargs["modulus"] = cfg.modulus
    elif cfg.task == "charlm":
        kwargs["context_len"] = cfg.context_len
    ds = make_dataset(cfg.task, seed, cfg.n_examples, **kwargs)
    if cfg.task == "modadd" and cfg.model == "mlp":
        vocab = ds.meta["vocab"]
        ds.train = Split(one_hot_pairs(ds.train.inputs, vocab), ds.train.targets)
        ds.eval = Split(one_hot_pairs(ds.eval.inputs, vocab), ds.eval.targets)
    return ds


def build_model(cfg, ds, seed):
    if cfg.model == "mlp":
        if cfg.task == "regression":
            sizes = [ds.meta["in_dim"]] + list(cfg.hidden_sizes) + [ds.meta["out_dim"]]
            return build_mlp(sizes, activation="gelu", seed=seed, loss_kind="mse")
        if cfg.task == "gaussians":
            sizes = [ds.meta["in_dim"]] + list(cfg.hidden_sizes) + [ds.meta["n_classes"]]
            return build_mlp(sizes, activation="gelu", seed=seed, loss_kind="ce")
        # modadd on one-hot inputs
        vocab = ds.meta["vocab"]
        sizes = [ds.meta["seq_len"] * vocab] + list(cfg.hidden_sizes) + [vocab]
        return build_mlp(sizes, activation="gelu", seed=seed, loss_kind="ce")
    vocab = ds.meta["vocab"]
    loss_kind = ds.meta["loss"] if ds.meta["loss"] in ("ce_lm", "ce_last") else "ce_lm"
    context = max(ds.meta["seq_len"], 2)
    return build_tiny_transformer(vocab, cfg.d_model, cfg.n_heads, cfg.n_layers,
                                  context, seed=seed, loss_kind=loss_kind)


def _train_kwargs(cfg, seed, strategy, keep_fraction, out_dir):
    return dict(strategy=strategy, keep_fraction=keep_fraction, scope=cfg.scope,
                steps=cfg.steps, accum_n=cfg.accum_n, base_lr=cfg.lr, seed=seed,
                optimizer=cfg.optimizer, batch_size=cfg.batch_size,
                eval_every=cfg.eval_every, warmup_ratio=cfg.warmup_ratio,
                weight_decay=cfg.weight_decay, masked_mode=cfg.masked_mode,
                exempt_groups=cfg.exempt_groups, out_dir=out_dir,
                checkpoint_every=cfg.checkpoint_every, dump_masks=cfg.dump_masks)


def prepare_start(cfg, seed, out_dir=None):
    """Model + target dataset, after the optional vanilla warm phase.

    The warm phase stands in for pretraining: a short dense run on a
    related dataset (an independent fresh draw of the same task, variant 1)
    starting from the seed's initialization. Returns
    (model, dataset, base_params).
    """
    ds = build_data(cfg, seed)
    model = build_model(cfg, ds, seed)
    if cfg.warm_steps > 0:
        warm_ds = build_data(cfg, seed, variant=1)
        kwargs = _train_kwargs(cfg, seed, "none", 1.0, None)
        kwargs["steps"] = cfg.warm_steps
        kwargs["eval_every"] = 0
        train(model, warm_ds, **kwargs)
    base = model.registry.snapshot()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "base.gmtckpt"), base)
    return model, ds, base


def run_single(cfg, seed, strategy, keep_fraction, out_dir=None):
    """One full run: warm phase (optional) then masked fine-tuning."""
    model, ds, _ = prepare_start(cfg, seed, out_dir=out_dir)
    report = train(model, ds, **_train_kwargs(cfg, seed, strategy, keep_fraction, out_dir))
    return report, model, ds


def run_train_command(cfg):
    if not cfg.out:
        raise ConfigError("train needs --out DIR")
    write_resolved_config(cfg, cfg.out)
    report, _, _ = run_single(cfg, cfg.seed, cfg.strategy, cfg.keep_fraction, cfg.out)
    write_csv(os.path.join(cfg.out, "eval.csv"),
              ["step", "eval_loss", "eval_metric"],
              [{"step": s, "eval_loss": l, "eval_metric": m}
               for s, l, m in zip(report.eval_steps, report.eval_losses, report.eval_metrics)])
    write_csv(os.path.join(cfg.out, "report.csv"), _REPORT_HEADER, [_report_row(report)])
    return report


_REPORT_HEADER = ["final_eval_loss", "final_eval_metric", "train_samples",
                  "model_flops", "selection_flops", "checksum",
                  "throughput", "wall_seconds"]


def _report_row(report):
    return {
        "final_eval_loss": report.final_eval_loss,
        "final_eval_metric": report.final_eval_metric,
        "train_samples": report.train_samples,
        "model_flops": report.model_flops,
        "selection_flops": report.selection_flops,
        "checksum": f"{report.checksum:016x}",
        "throughput": report.throughput,
        "wall_seconds": report.wall_seconds,
    }


# ---------------------------------------------------------------------------
# parallel cell execution


def _worker_count():
    raw = os.environ.get("GMT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map_cells(worker, cells, on_partial=None):
    """Apply worker over cells, merging results in cell order.

    If any cell fails, completed rows are handed to `on_partial` (which
    flags them on disk) before the failure propagates.
    """
    results = []
    try:
        n = min(_worker_count(), len(cells))
        if n > 1:
            try:
                with ProcessPoolExecutor(max_workers=n) as pool:
                    futures = [pool.submit(worker, c) for c in cells]
                    for f in futures:
                        results.append(f.result())
                    return results
            except (OSError, PermissionError):
                results = []  # sandboxed environments may forbid subprocesses
        for c in cells:
            results.append(worker(c))
        return results
    except Exception:
        if on_partial is not None and results:
            on_partial(results)
        raise


def _compare_cell(args):
    cfg, strategy, seed = args
    out_dir = os.path.join(cfg.out, "runs", f"{strategy}_s{seed}")
    keep = 1.0 if strategy in ("none", "hft") else cfg.keep_fraction
    report, _, _ = run_single(cfg, seed, strategy, keep, out_dir)
    row = {"strategy": strategy, "seed": seed,
           "eval_loss": report.final_eval_loss,
           "eval_metric": report.final_eval_metric,
           "model_flops": report.model_flops,
           "selection_flops": report.selection_flops,
           "throughput": report.throughput}
    return row


def run_compare(cfg):
    """One row per (strategy, seed); 'drop' rows post-process the none run."""
    if not cfg.out:
        raise ConfigError("compare needs --out DIR")
    strategies = list(cfg.strategies)
    with_drop = "drop" in strategies
    if with_drop:
        strategies = [s for s in strategies if s != "drop"]
        if "none" not in strategies:
            raise ConfigError("'drop' requires 'none' in the strategies list")
    write_resolved_config(cfg, cfg.out)
    cells = [(cfg, s, seed) for s in strategies for seed in cfg.seeds]
    header = ["strategy", "seed", "eval_loss", "eval_metric",
              "model_flops", "selection_flops", "throughput"]

    def flag_partial(done):
        write_csv(os.path.join(cfg.out, "compare.partial.csv"), header, done)

    rows = _map_cells(_compare_cell, cells, on_partial=flag_partial)
    if with_drop:
        from gradmask.delta import DropSpec, apply_drop, compute_delta

        for seed in cfg.seeds:
            none_dir = os.path.join(cfg.out, "runs", f"none_s{seed}")
            base = load_checkpoint(os.path.join(none_dir, "base.gmtckpt"))
            ft = load_checkpoint(os.path.join(none_dir, "final.gmtckpt"))
            none_row = next(r for r in rows if r["strategy"] == "none" and r["seed"] == seed)
            delta = compute_delta(base, ft)
            merged = apply_drop(delta, DropSpec(rate=cfg.mask_ratio, strategy="trivial",
                                                seed=seed, rescale=cfg.rescale))
            ds = build_data(cfg, seed)
            model = build_model(cfg, ds, seed)
            model.registry.load_values(merged)
            loss, metric = evaluate(model, ds.eval)
            rows.append({"strategy": "drop", "seed": seed,
                         "eval_loss": loss, "eval_metric": metric,
                         "model_flops": none_row["model_flops"],
                         "selection_flops": 0, "throughput": none_row["throughput"]})
    path = write_csv(os.path.join(cfg.out, "compare.csv"), header, rows)
    emit_plot_data(path, cfg.out)
    return rows


def _sweep_cell(args):
    cfg, ratio, seed = args
    out_dir = os.path.join(cfg.out, "runs", f"ratio{ratio:g}_s{seed}")
    report, _, _ = run_single(cfg, seed, "gmt", 1.0 - ratio, out_dir)
    return {"mask_ratio": ratio, "seed": seed,
            "eval_loss": report.final_eval_loss,
            "eval_metric": report.final_eval_metric}


def run_mask_ratio_sweep(cfg, ratios=None):
    if not cfg.out:
        raise ConfigError("sweep-mask needs --out DIR")
    ratios = cfg.ratios if ratios is None else ratios
    write_resolved_config(cfg, cfg.out)
    cells = [(cfg, ratio, seed) for ratio in ratios for seed in cfg.seeds]
    header = ["mask_ratio", "seed", "eval_loss", "eval_metric"]

    def flag_partial(done):
        write_csv(os.path.join(cfg.out, "sweep_mask.partial.csv"), header, done)

    rows = _map_cells(_sweep_cell, cells, on_partial=flag_partial)
    path = write_csv(os.path.join(cfg.out, "sweep_mask.csv"), header, rows)
    emit_plot_data(path, cfg.out)
    return rows


def run_drop_sweep_command(cfg):
    """Vanilla fine-tune per seed, then the (rate, strategy) drop grid."""
    if not cfg.out:
        raise ConfigError("sweep-drop needs --out DIR")
    write_resolved_config(cfg, cfg.out)
    all_rows = []
    for seed in cfg.seeds:
        out_dir = os.path.join(cfg.out, "runs", f"ft_s{seed}")
        model, ds, base = prepare_start(cfg, seed, out_dir=out_dir)
        train(model, ds, **_train_kwargs(cfg, seed, "none", 1.0, out_dir))
        ft = model.registry.snapshot()

        def eval_merged(params, model=model, ds=ds):
            model.registry.load_values(params)
            return evaluate(model, ds.eval)

        rows = drop_sweep(base, ft, cfg.drop_rates, DROP_STRATEGIES, eval_merged,
                          seed=seed, rescale=cfg.rescale)
        for row in rows:
            row["seed"] = seed
        model.registry.load_values(ft)
        all_rows.extend(rows)
    header = ["strategy", "rate", "seed", "eval_loss", "eval_metric", "kept_fraction"]
    path = write_csv(os.path.join(cfg.out, "sweep_drop.csv"), header, all_rows)
    emit_plot_data(path, cfg.out)
    return all_rows


# ---------------------------------------------------------------------------
# plot data


def read_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = []
        for line in fh:
            parts = line.strip().split(",")
            rows.append(dict(zip(header, parts)))
    return header, rows


def emit_plot_data(csv_path, out_dir):
    """Plain whitespace-separated series files ready for generic plotters."""
    header, rows = read_csv(csv_path)
    written = []

    def emit(name, lines):
        path = os.path.join(out_dir, name)
        with open(path, "w", newline="") as fh:
            fh.writelines(lines)
        written.append(path)

    if "mask_ratio" in header:
        by_ratio = {}
        for row in rows:
            by_ratio.setdefault(float(row["mask_ratio"]), []).append(float(row["eval_loss"]))
        emit("plot_mask_ratio.dat",
             [f"{r!r} {sum(v) / len(v)!r}\n" for r, v in sorted(by_ratio.items())])
    elif "rate" in header:
        for strategy in sorted({row["strategy"] for row in rows}):
            series = {}
            for row in rows:
                if row["strategy"] == strategy:
                    series.setdefault(float(row["rate"]), []).append(float(row["eval_loss"]))
            emit(f"plot_drop_{strategy}.dat",
                 [f"{r!r} {sum(v) / len(v)!r}\n" for r, v in sorted(series.items())])
    elif "strategy" in header:
        by_strategy = {}
        for row in rows:
            by_strategy.setdefault(row["strategy"], []).append(
                (int(row["seed"]), float(row["eval_loss"])))
        lines = []
        for strategy, vals in sorted(by_strategy.items()):
            cols = " ".join(repr(v) for _, v in sorted(vals))
            lines.append(f"{strategy} {cols}\n")
        emit("plot_compare_bars.dat", lines)
    return written
