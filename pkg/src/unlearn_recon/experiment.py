"""End-to-end deletion experiments driven by a JSON configuration file.

Pipeline: load data -> normalize -> split private/public -> embed -> pick
lambda -> train on the private set -> for every deletion, retrain without the
sample and run the configured attacks -> score and report.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets as ds
from .attack import AttackError, NoUpdateError, generalized_attack
from .baselines import avg_baseline, maxdiff_baseline
from .embeddings import Embedding, embed, identity_embedding, make_rff, median_bandwidth
from .evaluation import SimilarityRecord, cosine_similarity, emit_report, finite_or_none
from .losses import LOSS_KINDS, LossSpec
from .models import LAMBDA_GRID, ModelParams, TrainReport, retrain_without, select_lambda, train

log = logging.getLogger(__name__)

METHODS = ("hrec", "avg", "maxdiff")
OUTPUT_ENV = "UNLEARN_RECON_OUT"


class ConfigError(ValueError):
    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Parsed experiment configuration; ``raw`` is the canonical dict that
    the digest is computed from (after command-line overrides)."""

    raw: dict
    base_dir: Path
    dataset: dict
    split: ds.SplitSpec
    embedding: dict
    loss: dict
    deletions: object
    methods: tuple[str, ...]
    output_dir: Path
    jobs: int
    seed: int
    assume_known_lambda: bool
    trainer: dict
    normalize: str

    @property
    def digest(self) -> str:
        return config_digest(self.raw)


# Keys that change where or how fast a run happens but never its results.
_EXECUTION_KEYS = ("output_dir", "jobs")


def config_digest(raw: dict) -> str:
    content = {k: v for k, v in raw.items() if k not in _EXECUTION_KEYS}
    canonical = json.dumps(content, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _derived_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, np.uint64)[0])


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _dataset_dim(section: dict, base: Path) -> int | None:
    """Feature dimension read from headers only, or ``None`` if unknown."""
    src = section.get("source")
    try:
        if src == "synthetic":
            return int(section["d"])
        if src == "csv":
            with (base / section["path"]).open(encoding="utf-8") as fh:
                return len(fh.readline().split(",")) - 1
        if src == "idx":
            head = ds._read_maybe_gzip(base / section["images"])[:20]
            magic, _, h, w = struct.unpack(">IIII", head[:16])
            c = struct.unpack(">I", head[16:20])[0] if magic == ds.IDX_IMAGES_RGB_MAGIC else 1
            return h * w * c
    except (OSError, KeyError, ValueError, struct.error):
        return None
    return None


def parse_config(raw: dict, base_dir: str | Path = ".", *, check_paths: bool = True) -> ExperimentConfig:
    """Validate ``raw`` and build an :class:`ExperimentConfig`.

    Every violation is collected; :class:`ConfigError` carries one diagnostic
    per problem, each prefixed by its field path.
    """
    base = Path(base_dir)
    diags: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: configuration must be a JSON object"])
    raw = copy.deepcopy(raw)
    known = {"dataset", "normalize", "split", "embedding", "loss", "deletions", "methods",
             "attack", "output_dir", "jobs", "seed", "trainer", "title"}
    for key in sorted(set(raw) - known):
        diags.append(f"{key}: unknown field")
    seed = raw.get("seed", 0)
    if not _is_int(seed) or seed < 0:
        diags.append("seed: must be a non-negative integer")
        seed = 0

    # dataset
    data = raw.get("dataset")
    if not isinstance(data, dict):
        diags.append("dataset: required object")
        data = {}
    src = data.get("source")
    if src == "synthetic":
        for k in ("n", "d"):
            if not _is_int(data.get(k)) or data.get(k) < (2 if k == "n" else 1):
                diags.append(f"dataset.{k}: required positive integer")
        if data.get("task", "regression") not in ds.TASKS:
            diags.append(f"dataset.task: must be one of {list(ds.TASKS)}")
        if not _is_num(data.get("noise_std", 0.1)) or data.get("noise_std", 0.1) < 0:
            diags.append("dataset.noise_std: must be a number >= 0")
    elif src == "csv":
        if not isinstance(data.get("path"), str):
            diags.append("dataset.path: required for csv source")
        elif check_paths and not (base / data["path"]).is_file():
            diags.append(f"dataset.path: file not found: {data['path']}")
        if not isinstance(data.get("target_column"), str):
            diags.append("dataset.target_column: required for csv source")
        if data.get("task", "regression") not in ds.TASKS:
            diags.append(f"dataset.task: must be one of {list(ds.TASKS)}")
    elif src == "idx":
        for k in ("images", "labels"):
            if not isinstance(data.get(k), str):
                diags.append(f"dataset.{k}: required for idx source")
            elif check_paths and not (base / data[k]).is_file():
                diags.append(f"dataset.{k}: file not found: {data[k]}")
    else:
        diags.append("dataset.source: must be one of csv, idx, synthetic")
    subset = data.get("subset")
    if subset is not None and (not isinstance(subset, dict) or not _is_int(subset.get("size"))
                               or subset["size"] < 2):
        diags.append("dataset.subset: must be {\"size\": int >= 2, \"seed\": int}")

    normalize = raw.get("normalize", "auto")
    if normalize not in ("auto", "minmax", "none"):
        diags.append("normalize: must be auto, minmax or none")

    # split
    split_raw = raw.get("split", {})
    frac = split_raw.get("public_fraction", 0.5) if isinstance(split_raw, dict) else None
    if not _is_num(frac) or not 0 < frac < 1:
        diags.append("split.public_fraction: must lie in (0, 1)")
        frac = 0.5
    split_seed = split_raw.get("seed", _derived_seed(seed, 1)) if isinstance(split_raw, dict) else 0

    # embedding
    emb = raw.get("embedding", {"kind": "identity"})
    if not isinstance(emb, dict) or emb.get("kind") not in ("identity", "rff"):
        diags.append("embedding.kind: must be identity or rff")
        emb = {"kind": "identity"}
    if emb["kind"] == "rff":
        dp = emb.get("output_dim")
        if not _is_int(dp) or dp < 2:
            diags.append("embedding.output_dim: rff needs an integer >= 2")
        bw = emb.get("bandwidth", "median")
        if bw != "median" and (not _is_num(bw) or bw <= 0):
            diags.append("embedding.bandwidth: must be 'median' or a number > 0")
    if "input_dim" in emb:
        d = _dataset_dim(data, base)
        if d is not None and emb["input_dim"] != d:
            diags.append(f"embedding.input_dim: {emb['input_dim']} does not match dataset dimension {d}")

    # loss
    loss = raw.get("loss")
    if not isinstance(loss, dict) or loss.get("kind") not in LOSS_KINDS:
        diags.append(f"loss.kind: must be one of {list(LOSS_KINDS)}")
        loss = {"kind": "ridge"}
    lam = loss.get("lambda", "grid")
    if lam != "grid" and (not _is_num(lam) or lam < 0):
        diags.append("loss.lambda: must be a number >= 0 or 'grid'")
    grid = loss.get("grid", list(LAMBDA_GRID))
    if not isinstance(grid, list) or not grid or not all(_is_num(g) and g >= 0 for g in grid):
        diags.append("loss.grid: must be a non-empty list of numbers >= 0")
    task = data.get("task") if src != "idx" else "multiclass"
    if loss["kind"] in ("logistic", "svm_squared_hinge") and task not in (None, "binary"):
        diags.append(f"loss.kind: {loss['kind']} needs a binary dataset, got {task}")
    if loss["kind"] == "softmax_ce" and task == "regression":
        diags.append("loss.kind: softmax_ce needs a classification dataset")

    # deletions
    dels = raw.get("deletions", "all")
    if dels != "all":
        ok = isinstance(dels, dict) and len(dels) >= 1 and (
            (_is_int(dels.get("first")) and dels["first"] >= 1)
            or (isinstance(dels.get("indices"), list) and all(_is_int(i) and i >= 0 for i in dels["indices"]))
            or (_is_int(dels.get("sample")) and dels["sample"] >= 1)
        )
        if not ok:
            diags.append("deletions: must be 'all', {first: N}, {indices: [...]} or {sample: N, seed: S}")

    methods = raw.get("methods", list(METHODS))
    if not isinstance(methods, list) or not methods or any(m not in METHODS for m in methods) \
            or len(set(methods)) != len(methods):
        diags.append(f"methods: must be a non-empty subset of {list(METHODS)}")
        methods = list(METHODS)

    attack = raw.get("attack", {})
    known_lam = attack.get("assume_known_lambda", False) if isinstance(attack, dict) else False
    if not isinstance(known_lam, bool):
        diags.append("attack.assume_known_lambda: must be true or false")

    jobs = raw.get("jobs", 1)
    if not _is_int(jobs) or jobs < 1:
        diags.append("jobs: must be an integer >= 1")
        jobs = 1

    out = raw.get("output_dir", "out")
    if not isinstance(out, str) or not out:
        diags.append("output_dir: must be a non-empty string")
        out = "out"

    trainer = raw.get("trainer", {})
    if not isinstance(trainer, dict) or set(trainer) - {"tol", "max_iter"}:
        diags.append("trainer: only 'tol' and 'max_iter' are accepted")
        trainer = {}

    if diags:
        raise ConfigError(diags)
    return ExperimentConfig(
        raw=raw, base_dir=base, dataset=data, split=ds.SplitSpec(float(frac), int(split_seed)),
        embedding=emb, loss=loss, deletions=dels, methods=tuple(methods),
        output_dir=Path(out) if Path(out).is_absolute() else base / out,
        jobs=int(jobs), seed=int(seed), assume_known_lambda=bool(known_lam),
        trainer=dict(trainer), normalize=normalize,
    )


def load_config(path: str | Path, *, out: str | None = None, jobs: int | None = None,
                seed: int | None = None) -> ExperimentConfig:
    """Read a config file and apply overrides (flag > environment > file)."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError([f"<file>: cannot read {path}: {exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<file>: invalid JSON at line {exc.lineno}: {exc.msg}"]) from exc
    if isinstance(raw, dict):
        if jobs is not None:
            raw["jobs"] = jobs
        if seed is not None:
            raw["seed"] = seed
    cfg = parse_config(raw, path.parent)
    out = out or os.environ.get(OUTPUT_ENV)
    if out:
        cfg.output_dir = Path(out)
    return cfg


def validate_config_file(path: str | Path) -> list[str]:
    try:
        load_config(path)
    except ConfigError as exc:
        return exc.diagnostics
    return []


# --------------------------------------------------------------------------
# Pipeline
# --------------------------------------------------------------------------


def load_dataset(cfg: ExperimentConfig) -> ds.Dataset:
    data = cfg.dataset
    src = data["source"]
    if src == "synthetic":
        spec = ds.SyntheticSpec(
            n=data["n"], d=data["d"], task=data.get("task", "regression"),
            noise_std=float(data.get("noise_std", 0.1)),
            seed=data.get("seed", _derived_seed(cfg.seed, 0)), n_classes=data.get("n_classes", 3),
        )
        dataset = ds.synthesize(spec)
    elif src == "csv":
        dataset = ds.load_csv(cfg.base_dir / data["path"], data["target_column"],
                              data.get("task", "regression"))
    else:
        dataset = ds.load_idx(cfg.base_dir / data["images"], cfg.base_dir / data["labels"])
    subset = data.get("subset")
    if subset:
        if subset["size"] > dataset.n:
            raise ExperimentError("data", f"subset size {subset['size']} exceeds n={dataset.n}")
        rng = ds.rng_from_seed(subset.get("seed", _derived_seed(cfg.seed, 2)))
        dataset = dataset.subset(np.sort(rng.choice(dataset.n, subset["size"], replace=False)))
    # idx pixels already sit on the fixed [-1, 1] map; per-column min-max would distort images
    if cfg.normalize == "minmax" or (cfg.normalize == "auto" and src != "idx"):
        dataset = ds.normalize_to_range(dataset)
    return dataset


def deletion_indices(cfg: ExperimentConfig, n_private: int) -> np.ndarray:
    dels = cfg.deletions
    if dels == "all":
        return np.arange(n_private)
    if "first" in dels:
        return np.arange(min(dels["first"], n_private))
    if "indices" in dels:
        idx = np.array(sorted(set(dels["indices"])), dtype=np.int64)
        if idx.size and idx[-1] >= n_private:
            raise ExperimentError("deletions", f"index {idx[-1]} out of range for {n_private} private rows")
        return idx
    rng = ds.rng_from_seed(dels.get("seed", _derived_seed(cfg.seed, 3)))
    return np.sort(rng.choice(n_private, min(dels["sample"], n_private), replace=False))


@dataclass
class Prepared:
    dataset: ds.Dataset
    private: ds.Dataset
    public: ds.Dataset
    embedding: Embedding
    loss: LossSpec
    Z_private: np.ndarray
    Z_public: np.ndarray
    beta_plus: ModelParams
    report: TrainReport
    deletions: np.ndarray


def prepare(cfg: ExperimentConfig) -> Prepared:
    try:
        dataset = load_dataset(cfg)
        private, public = ds.split_private_public(dataset, cfg.split)
    except (OSError, ValueError) as exc:
        raise ExperimentError("data", str(exc)) from exc

    try:
        e = cfg.embedding
        if e["kind"] == "identity":
            embedding = identity_embedding(dataset.d)
        else:
            bw = e.get("bandwidth", "median")
            gamma = median_bandwidth(public.features) if bw == "median" else float(bw)
            embedding = make_rff(dataset.d, e["output_dim"], gamma, e.get("seed", _derived_seed(cfg.seed, 4)))
    except ValueError as exc:
        raise ExperimentError("embedding", str(exc)) from exc

    lc = cfg.loss
    k = dataset.n_classes or 1
    n_classes = k if lc["kind"] == "softmax_ce" or (lc["kind"] == "ridge" and dataset.task == "multiclass") else 1
    train_kw = dict(cfg.trainer)
    if lc.get("lambda", "grid") == "grid":
        log.info("selecting lambda on a private holdout")
        lam = select_lambda(private, embedding, LossSpec(lc["kind"], 0.0, n_classes),
                            grid=lc.get("grid", LAMBDA_GRID), seed=_derived_seed(cfg.seed, 5), **train_kw)
    else:
        lam = float(lc["lambda"])
    loss = LossSpec(lc["kind"], lam, n_classes)

    Z_private = embed(embedding, private.features)
    Z_public = embed(embedding, public.features)
    beta_plus, report = train(Z_private, private.targets, loss, embedding_hash=embedding.digest(), **train_kw)
    if not report.converged:
        raise ExperimentError("train", f"training on the full private set did not converge: {report}")
    return Prepared(dataset, private, public, embedding, loss, Z_private, Z_public, beta_plus, report,
                    deletion_indices(cfg, private.n))


@dataclass
class DeletionResult:
    index: int
    records: list[SimilarityRecord]
    reconstructions: dict[str, np.ndarray] = field(default_factory=dict)


def _true_label(prep: Prepared, i: int):
    y = prep.private.targets[i]
    return float(y) if prep.private.task == "regression" else int(y)


def attack_one(prep: Prepared, index: int, cfg: ExperimentConfig) -> DeletionResult:
    """Retrain without private row ``index`` and run every configured method."""
    x = prep.private.features[index]
    y_true = _true_label(prep, index)
    try:
        beta_minus, rep = retrain_without(prep.Z_private, prep.private.targets, index, prep.loss,
                                          embedding_hash=prep.embedding.digest(), **cfg.trainer)
    except ValueError as exc:
        raise ExperimentError("unlearn", f"deletion {index}: {exc}") from exc
    common_flags = [] if rep.converged else [f"retrain_{rep.status}"]
    result = DeletionResult(index, [])

    for method in cfg.methods:
        flags = list(common_flags)
        rec_fields = {}
        if method == "avg":
            x_hat = avg_baseline(prep.public.features)
        elif method == "maxdiff":
            x_hat = maxdiff_baseline(prep.public.features, prep.beta_plus, beta_minus,
                                     prep.embedding, Z_pub=prep.Z_public)
        else:
            oracle = cfg.assume_known_lambda
            try:
                rec = generalized_attack(
                    prep.beta_plus, beta_minus, prep.public.features, prep.public.targets, prep.loss,
                    prep.embedding, Z_pub=prep.Z_public,
                    known_lambda=prep.loss.lam if oracle else None,
                    curvature_data=(prep.private.features, prep.private.targets) if oracle else None,
                )
            except NoUpdateError:
                x_hat = np.zeros_like(x)
                flags.append("no_update")
            except AttackError as exc:
                x_hat = np.zeros_like(x)
                flags.append(f"failed_{exc.stage or 'attack'}")
            else:
                x_hat = rec.features
                flags += rec.flags
                z_true = embed(prep.embedding, x)
                rec_fields = {
                    "scale": finite_or_none(rec.scale),
                    "inversion_residual": finite_or_none(rec.diagnostics.get("inversion_residual")),
                    "embedding_cosine": cosine_similarity(rec.embedded[:-1], z_true[:-1]),
                }
                if rec.label is not None and prep.private.task != "regression":
                    rec_fields["predicted_label"] = int(rec.label)
                    rec_fields["label_correct"] = bool(rec.label == y_true)
        cos, degenerate = cosine_similarity(x_hat, x, return_flag=True)
        if degenerate:
            flags.append("zero_norm")
        result.records.append(SimilarityRecord(int(index), method, cos, y_true, flags=flags, **rec_fields))
        result.reconstructions[method] = np.asarray(x_hat, dtype=np.float64)
    return result


@dataclass
class RunResult:
    prepared: Prepared
    records: list[SimilarityRecord]
    reconstructions: dict[str, np.ndarray]
    curves: dict


def run_experiment(cfg: ExperimentConfig, *, write: bool = True) -> RunResult:
    prep = prepare(cfg)
    log.info("private n=%d public m=%d d'=%d lambda=%g deletions=%d",
             prep.private.n, prep.public.n, prep.embedding.output_dim, prep.loss.lam, len(prep.deletions))

    def work(i):
        return attack_one(prep, int(i), cfg)

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(work, prep.deletions))
    else:
        results = [work(i) for i in prep.deletions]
    results.sort(key=lambda r: r.index)

    records = [rec for r in results for rec in r.records]
    recons = {m: np.stack([r.reconstructions[m] for r in results]) for m in cfg.methods}
    curves = {}
    if write:
        out = cfg.output_dir
        try:
            out.mkdir(parents=True, exist_ok=True)
            curves = emit_report(records, out, cfg.digest, cfg.methods, cfg.raw.get("title", ""))
            np.save(out / "deletions.npy", prep.deletions)
            for m, arr in recons.items():
                np.save(out / f"reconstructions_{m}.npy", arr)
            prep.beta_plus.save(out / "model_plus.bin")
            prep.embedding.save(out / "embedding.bin")
            (out / "manifest.json").write_text(json.dumps(_manifest(cfg, prep, records), indent=2,
                                                          sort_keys=True) + "\n")
        except OSError as exc:
            raise ExperimentError("report", str(exc)) from exc
    return RunResult(prep, records, recons, curves)


def _manifest(cfg: ExperimentConfig, prep: Prepared, records) -> dict:
    flagged = {}
    for r in records:
        for f in r.flags:
            flagged[f] = flagged.get(f, 0) + 1
    return {
        "config_digest": cfg.digest,
        "config": cfg.raw,
        "lambda": prep.loss.lam,
        "n_private": prep.private.n,
        "n_public": prep.public.n,
        "embedding_digest": prep.embedding.digest(),
        "bandwidth": prep.embedding.bandwidth,
        "train_report": {
            "objective": prep.report.objective,
            "grad_max_norm": prep.report.grad_max_norm,
            "iterations": prep.report.iterations,
            "status": prep.report.status,
        },
        "flag_counts": flagged,
    }


def summarize(records, methods) -> dict[str, dict[str, float]]:
    out = {}
    for m in methods:
        vals = np.array([r.cosine for r in records if r.method == m])
        if vals.size == 0:
            continue
        out[m] = {
            "n": int(vals.size),
            "median": float(np.median(vals)),
            "frac_ge_0.9": float(np.mean(vals >= 0.9)),
            "frac_ge_0.99": float(np.mean(vals >= 0.99)),
        }
    return out


def montage(cfg: ExperimentConfig, seed: int | None = None, output: str | Path | None = None) -> Path:
    """One seeded deletion per label; rows: original, then HRec and MaxDiff
    reconstructions (whichever were run)."""
    from .evaluation import montage_grid, read_records, to_bytes_image, write_pnm

    out = cfg.output_dir
    records = read_records(out / "records.jsonl")
    dataset = load_dataset(cfg)
    if dataset.image_shape is None or dataset.scaling is None:
        raise ExperimentError("montage", "dataset is not an image dataset")
    private, _ = ds.split_private_public(dataset, cfg.split)
    deletions = list(np.load(out / "deletions.npy"))
    rows_methods = [m for m in ("hrec", "maxdiff") if (out / f"reconstructions_{m}.npy").exists()]
    recon = {m: np.load(out / f"reconstructions_{m}.npy") for m in rows_methods}
    rng = ds.rng_from_seed(cfg.seed if seed is None else seed)

    hrec_idx = sorted({r.index for r in records})
    columns = []
    for label in range(dataset.n_classes or 0):
        cands = [i for i in hrec_idx if int(private.targets[i]) == label]
        if not cands:
            log.warning("label %d has no deletion in the record set; column skipped", label)
            continue
        columns.append(int(rng.choice(cands)))
    grid_rows = [[to_bytes_image(private.features[i], dataset.scaling) for i in columns]]
    for m in rows_methods:
        grid_rows.append([to_bytes_image(recon[m][deletions.index(i)], dataset.scaling) for i in columns])
    image = montage_grid(grid_rows, dataset.image_shape)
    suffix = ".pgm" if dataset.image_shape[2] == 1 else ".ppm"
    path = Path(output) if output else out / f"montage{suffix}"
    write_pnm(image if dataset.image_shape[2] == 3 else image[:, :, 0], path, f"config {cfg.digest}")
    return path

