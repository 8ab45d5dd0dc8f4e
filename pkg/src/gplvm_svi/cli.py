"""Command-line front end: train, predict, gradcheck, census.

Settings come from an optional config file (JSON object or key=value lines)
overridden by flags.  Exit codes: 0 ok, 1 usage, 2 data, 3 numerical,
4 check failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import variational as var
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data_io import DataError, DataMatrix, SplitSpec, apply_random_mask, load_csv, load_mask, split, \
    with_mask, write_csv
from .encoder import IMPUTATION_POLICIES
from .likelihoods import check_counts
from .linalg import CholeskyError
from .model import ModelVariant, init_model
from .predict import INIT_STRATEGIES, TestInferenceConfig, infer_latent_amortized, infer_latent_reoptimize, metrics, \
    reconstruct, write_predictions_csv
from .train import NonFiniteError, TrainConfig, ard_report, finite_difference_check, parameter_census, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, EXIT_CHECK = 0, 1, 2, 3, 4
GRADCHECK_MAX_N = 32
GRADCHECK_TOL = {"gaussian": 1e-4, "poisson": 1e-3}
LIKELIHOODS = ("gaussian", "poisson")


class UsageError(ValueError):
    pass


class CheckFailure(RuntimeError):
    pass


@dataclass
class RunConfig:
    data: str | None = None
    mask: str | None = None
    model: str = "bsvi"
    likelihood: str = "gaussian"
    Q: int = 2
    M: int = 20
    lr: float = 0.01
    batch: int = 100
    iters: int = 1000
    J: int = 1
    beta: float = 1.0
    seed: int | None = None
    test_fraction: float = 0.0
    missing_p: float = 0.0
    out: str = "out"
    imputation: str | None = None
    center: bool = False
    ard_k: int = 2
    f_samples: int = 4
    # prediction
    checkpoint: str | None = None
    inner_iters: int = 500
    inner_lr: float = 0.05
    infer_J: int = 8
    pred_J: int = 100
    holdout_p: float = 0.0
    decode_mean: bool = False
    infer_init: str = "nearest"
    # gradcheck / census
    N: int = 8
    D: int = 3
    variants: str = "all"
    likelihoods: str = "all"
    threads: int | None = None

    def validate(self) -> None:
        try:
            ModelVariant.parse(self.model)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if self.likelihood not in LIKELIHOODS:
            raise UsageError(f"likelihood must be one of {LIKELIHOODS}, got {self.likelihood!r}")
        if self.infer_init not in INIT_STRATEGIES:
            raise UsageError(f"infer_init must be one of {INIT_STRATEGIES}, got {self.infer_init!r}")
        if self.imputation is not None and self.imputation not in IMPUTATION_POLICIES:
            raise UsageError(f"imputation must be one of {IMPUTATION_POLICIES}, got {self.imputation!r}")
        for name in ("Q", "M", "batch", "J", "N", "D", "infer_J", "pred_J", "f_samples"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be a positive integer")
        if self.iters < 0 or self.inner_iters < 0:
            raise UsageError("iteration counts must be nonnegative")
        if not self.lr > 0 or not self.inner_lr > 0:
            raise UsageError("learning rates must be positive")
        if self.beta < 0:
            raise UsageError("beta must be nonnegative")
        if not 0 <= self.test_fraction < 1 or not 0 <= self.missing_p < 1 or not 0 <= self.holdout_p < 1:
            raise UsageError("test_fraction, missing_p and holdout_p must lie in [0, 1)")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_ALIASES = {"mini_batch": "batch", "minibatch": "batch", "learning_rate": "lr", "variant": "model",
            "output": "out", "output_dir": "out", "z": "M", "q": "Q", "n": "N", "d": "D", "j": "J"}


def _key(raw: str) -> str:
    k = raw.strip().replace("-", "_")
    if k in _FIELD_TYPES:
        return k
    k = _ALIASES.get(k.lower(), k)
    if k not in _FIELD_TYPES:
        raise UsageError(f"unknown config key {raw!r}")
    return k


def _coerce(key: str, value):
    kind = _FIELD_TYPES[key]
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
        if "None" in kind:
            return None
        raise UsageError(f"config key {key} needs a value")
    try:
        if kind.startswith("bool"):
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return s in ("true", "1", "yes")
        if kind.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind.startswith("float"):
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError):
        raise UsageError(f"config key {key}: cannot interpret {value!r}") from None


def read_config_file(path) -> dict:
    """JSON object or ``key = value`` lines (``#`` starts a comment)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON config ({exc.msg} at line {exc.lineno})") from None
        items = raw.items()
    else:
        items = []
        for i, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}: line {i} is not key=value")
            k, v = line.split("=", 1)
            items.append((k, v.strip()))
    return {_key(k): _coerce(_key(k), v) for k, v in items}


def resolve_config(args: argparse.Namespace, base: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then flags; seed falls back to GPLVM_SEED, then 0."""
    values = dict(base or {})
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in _FIELD_TYPES:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = _coerce(name, v)
    cfg = RunConfig(**values)
    if cfg.seed is None:
        env = os.environ.get("GPLVM_SEED")
        try:
            cfg.seed = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"GPLVM_SEED must be an integer, got {env!r}") from None
    cfg.validate()
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _load_data(path, mask_path) -> DataMatrix:
    if not path:
        raise UsageError("no data file given (--data)")
    try:
        data = load_csv(path)
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None
    if mask_path:
        try:
            data = with_mask(data, load_mask(mask_path, data.values.shape))
        except FileNotFoundError:
            raise DataError(f"mask file not found: {mask_path}") from None
    if not data.mask.any(1).all():
        bad = int(np.flatnonzero(~data.mask.any(1))[0])
        raise DataError(f"{path}: row {bad + 1} has no observed entries")
    return data


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _check_likelihood_data(lik: str, data: DataMatrix) -> None:
    if lik == "poisson":
        try:
            check_counts(data.values[data.mask])
        except ValueError as exc:
            raise DataError(str(exc)) from None


def cmd_train(cfg: RunConfig) -> int:
    data = _load_data(cfg.data, cfg.mask)
    _check_likelihood_data(cfg.likelihood, data)
    out = _out_dir(cfg)
    variant = ModelVariant.parse(cfg.model)
    extra = {}
    if cfg.test_fraction > 0:
        data, test, train_rows, test_rows = split(data, SplitSpec(cfg.test_fraction, cfg.seed))
        write_csv(test, out / "test.csv")
        _write_json(out / "split.json", {"train_rows": train_rows.tolist(), "test_rows": test_rows.tolist()})
    if cfg.missing_p > 0:
        data = apply_random_mask(data, cfg.missing_p, cfg.seed)
    missing = not data.mask.all()
    if variant is ModelVariant.AEBSVI and missing and cfg.imputation is None:
        raise UsageError("aebsvi with missing data needs an imputation policy (--imputation)")
    if cfg.batch > data.N:
        raise UsageError(f"batch={cfg.batch} exceeds the {data.N} training rows")
    values = data.values
    center = None
    if cfg.center and cfg.likelihood == "gaussian":
        center = np.array([values[data.mask[:, d], d].mean() for d in range(data.D)])
        values = values - center
    extra["center"] = None if center is None else center.tolist()
    extra["N_train"] = data.N
    model = init_model(variant, values, data.mask, cfg.Q, cfg.M, cfg.likelihood, cfg.seed,
                       policy=cfg.imputation or "zero-fill")
    tcfg = TrainConfig(learning_rate=cfg.lr, batch_size=cfg.batch, max_iters=cfg.iters, J=cfg.J,
                       seed=cfg.seed, beta=cfg.beta, n_f_samples=cfg.f_samples)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, trace, state = train(model, values, data.mask, tcfg)
    save_checkpoint(out / "checkpoint.json", model, state, asdict(cfg), extra)
    trace.to_csv(out / "trace.csv")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mu, s = var.latent_summary(model.latents, values, data.mask)
    var.write_latents_csv(out / "latents.csv", mu, s)
    report = ard_report(model.kernel, min(cfg.ard_k, cfg.Q))
    _write_json(out / "ard.json", report.to_dict())
    _write_json(out / "config.json", asdict(cfg))
    last = trace.rows[-1].elbo if len(trace) else float("nan")
    print(f"trained {variant.value} ({cfg.likelihood}) N={data.N} D={data.D} Q={cfg.Q} M={cfg.M} "
          f"iters={cfg.iters} final_elbo={last:.6g} -> {out}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise UsageError("no checkpoint given (--checkpoint)")
    try:
        model, _, _, extra = load_checkpoint(cfg.checkpoint)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {cfg.checkpoint}") from None
    data = _load_data(cfg.data, cfg.mask)
    if data.D != model.D:
        raise DataError(f"dimension mismatch: test data has D={data.D} columns, checkpoint expects D={model.D}")
    lik = model.likelihood.name
    _check_likelihood_data(lik, data)
    out = _out_dir(cfg)
    values = data.values
    center = extra.get("center")
    if center is not None:
        values = values - np.asarray(center)
    # entries hidden from inference are the ones scored
    if cfg.holdout_p > 0:
        infer_mask = apply_random_mask(data, cfg.holdout_p, cfg.seed).mask
        score = data.mask & ~infer_mask
    else:
        infer_mask = data.mask
        score = data.mask
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if model.variant is ModelVariant.AEBSVI:
            if not infer_mask.all() and cfg.imputation is None and model.latents.policy == "reject":
                raise UsageError("test rows have missing entries and the encoder policy is 'reject'")
            q = infer_latent_amortized(model, values, infer_mask, cfg.imputation)
        else:
            icfg = TestInferenceConfig(cfg.inner_iters, cfg.inner_lr, cfg.infer_J, cfg.seed, cfg.beta, cfg.infer_init)
            q = infer_latent_reoptimize(model, values, infer_mask, icfg)
    pred = reconstruct(model, q, J=cfg.pred_J, seed=cfg.seed, decode_mean=cfg.decode_mean)
    if center is not None:
        pred.mean = pred.mean + np.asarray(center)
    write_predictions_csv(out / "predictions.csv", pred, infer_mask)
    mu = q.mean.numpy()
    if q.scale is None:
        s = np.zeros_like(mu)
    elif q.scale.dim() == 2:
        s = q.scale.numpy()
    else:
        H = q.scale
        cov = H @ H.transpose(-1, -2) + var.DENSE_COV_FLOOR * torch.eye(model.Q)
        s = torch.sqrt(torch.diagonal(cov, dim1=-2, dim2=-1)).numpy()
    var.write_latents_csv(out / "test_latents.csv", mu, s)
    if score.any():
        m = metrics(np.where(data.mask, data.values, 0.0), score, pred, lik).to_dict()
    else:
        m = {"rmse": None, "nlpd_sum": None, "nlpd_mean": None, "n_scored": 0}
    _write_json(out / "metrics.json", m)
    print(json.dumps(m))
    return EXIT_OK


def _gradcheck_data(cfg: RunConfig, lik: str):
    if cfg.data:
        data = _load_data(cfg.data, cfg.mask)
        _check_likelihood_data(lik, data)
        return data
    rng = np.random.default_rng([cfg.seed, 11])
    if lik == "poisson":
        Y = rng.poisson(3.0, size=(cfg.N, cfg.D)).astype(float)
    else:
        Y = rng.standard_normal((cfg.N, cfg.D))
    data = DataMatrix.full(Y)
    if cfg.missing_p > 0:
        data = apply_random_mask(data, cfg.missing_p, cfg.seed)
    return data


def _selection(spec: str, options, what: str):
    if spec == "all":
        return list(options)
    chosen = [s.strip() for s in spec.split(",") if s.strip()]
    for c in chosen:
        if c not in options:
            raise UsageError(f"unknown {what} {c!r}; choose from {', '.join(options)} or all")
    return chosen


def cmd_gradcheck(cfg: RunConfig, corrupt: bool = False) -> int:
    variants = _selection(cfg.variants, [v.value for v in ModelVariant], "variant")
    liks = _selection(cfg.likelihoods, LIKELIHOODS, "likelihood")
    offenders = []
    for lik in liks:
        data = _gradcheck_data(cfg, lik)
        if data.N > GRADCHECK_MAX_N:
            raise UsageError(f"gradcheck is limited to N <= {GRADCHECK_MAX_N}, got N={data.N}")
        tol = GRADCHECK_TOL[lik]
        for v in variants:
            model = init_model(v, data.values, data.mask, cfg.Q, cfg.M, lik, cfg.seed,
                               policy=cfg.imputation or "zero-fill")
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                errs = finite_difference_check(model, data.values, data.mask, np.arange(data.N), cfg.J,
                                               cfg.seed, 0, cfg.beta, cfg.f_samples, corrupt=corrupt)
            for block, e in errs.items():
                ok = e < tol
                print(f"{v:7s} {lik:8s} {block:32s} {e:.3e} {'ok' if ok else 'FAIL'}")
                if not ok:
                    offenders.append(f"{v}/{lik}/{block} ({e:.2e} >= {tol:g})")
    if offenders:
        raise CheckFailure("gradient check failed: " + "; ".join(offenders))
    print("gradient check passed")
    return EXIT_OK


def census_table(N: int, D: int, Q: int, M: int) -> list:
    return [(v.value,) + parameter_census(v, N, D, Q, M) for v in ModelVariant]


def cmd_census(cfg: RunConfig) -> int:
    print(f"N={cfg.N} D={cfg.D} Q={cfg.Q} M={cfg.M}")
    print(f"{'variant':8s} {'global':>10s} {'local':>10s}")
    for name, g, loc in census_table(cfg.N, cfg.D, cfg.Q, cfg.M):
        print(f"{name:8s} {g:10d} {loc:10d}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or key=value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="cap on intra-op threads")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gplvm-svi", description="Generalised GPLVM trained by stochastic variational inference.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="fit a model and write checkpoint, trace, latents and ARD report")
    _add_common(t)
    t.add_argument("--data")
    t.add_argument("--mask", help="0/1 CSV of observed entries")
    t.add_argument("--model", choices=[v.value for v in ModelVariant])
    t.add_argument("--likelihood", choices=LIKELIHOODS)
    t.add_argument("--Q", "-Q", type=int)
    t.add_argument("--M", "-M", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--J", "-J", type=int, help="latent samples per point")
    t.add_argument("--beta", type=float, help="latent KL weight")
    t.add_argument("--test-fraction", dest="test_fraction", type=float)
    t.add_argument("--missing-p", dest="missing_p", type=float)
    t.add_argument("--imputation", choices=IMPUTATION_POLICIES)
    t.add_argument("--center", action="store_const", const=True, default=None)
    t.add_argument("--ard-k", dest="ard_k", type=int)
    t.add_argument("--f-samples", dest="f_samples", type=int)

    p = sub.add_parser("predict", help="infer test latents, reconstruct and score")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--mask")
    p.add_argument("--inner-iters", dest="inner_iters", type=int)
    p.add_argument("--inner-lr", dest="inner_lr", type=float)
    p.add_argument("--infer-J", dest="infer_J", type=int)
    p.add_argument("--pred-J", dest="pred_J", type=int)
    p.add_argument("--holdout-p", dest="holdout_p", type=float,
                   help="fraction of observed entries hidden from inference and scored")
    p.add_argument("--imputation", choices=IMPUTATION_POLICIES)
    p.add_argument("--init", dest="infer_init", choices=INIT_STRATEGIES,
                   help="start test latents at the best-fitting training latent or at the prior")
    p.add_argument("--decode-mean", dest="decode_mean", action="store_const", const=True, default=None)

    g = sub.add_parser("gradcheck", help="compare gradients with central differences")
    _add_common(g)
    g.add_argument("--data")
    g.add_argument("--mask")
    g.add_argument("--variants", help="comma list or all")
    g.add_argument("--likelihoods", help="comma list or all")
    g.add_argument("--N", "-N", type=int)
    g.add_argument("--D", "-D", type=int)
    g.add_argument("--Q", "-Q", type=int)
    g.add_argument("--M", "-M", type=int)
    g.add_argument("--J", "-J", type=int)
    g.add_argument("--beta", type=float)
    g.add_argument("--missing-p", dest="missing_p", type=float)
    g.add_argument("--f-samples", dest="f_samples", type=int)
    g.add_argument("--corrupt-gradient", dest="corrupt_gradient", action="store_true", help=argparse.SUPPRESS)

    c = sub.add_parser("census", help="variational parameter counts per variant")
    _add_common(c)
    for name in ("N", "D", "Q", "M"):
        c.add_argument(f"--{name}", f"-{name}", type=int)
    return parser


_GRADCHECK_DEFAULTS = {"N": 8, "D": 3, "Q": 2, "M": 4, "J": 2}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args, _GRADCHECK_DEFAULTS if args.command == "gradcheck" else None)
        if cfg.threads is not None:
            if cfg.threads < 1:
                raise UsageError("threads must be positive")
            torch.set_num_threads(cfg.threads)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "predict":
            return cmd_predict(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, corrupt=args.corrupt_gradient)
        return cmd_census(cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, CholeskyError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CheckFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CHECK
    except ValueError as exc:
        print(f"usage error: {str(exc).splitlines()[0] if str(exc) else exc!r}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
