"""Command-line driver.

    brainmarkers phantom SPEC.json --seed 1 --out work/
    brainmarkers extract   --config run.json
    brainmarkers assemble  --config run.json --task ad-vs-cn --blocks radiomics,texture
    brainmarkers train-eval --config run.json --seed 7 --jobs 4

A JSON config holds the run of record; command-line flags override it.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path


from . import ml_harness, pipeline, synthetic
from .errors import (AssemblyError, BrainmarkersError, ConfigurationError, DegenerateInputError,
                     SpecError, StratificationError)
from .gbt import GBTConfig
from .texture import DEFAULT_HIPPOCAMPUS, TextureParams
from .thickness import ThicknessParams
from .volume_io import (PhantomSpec, generate_phantom, read_region_table, write_labelmap, write_nifti,
                        write_region_table)

log = logging.getLogger("brainmarkers")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
IMAGE_BLOCKS = ("radiomics", "texture", "thickness")
MISSING_BLOCKS = ("radiomics", "thickness")
GBT_KEYS = ("min_samples_leaf", "feature_subsample", "reg_lambda")


class UsageError(BrainmarkersError):
    pass


@dataclass
class RunConfig:
    out: Path = Path(".")
    manifest: Path | None = None
    region_table: Path | None = None
    features_dir: Path | None = None
    matrix: Path | None = None
    deep_features: Path | None = None
    task: str = "AD-vs-CN"
    blocks: tuple = IMAGE_BLOCKS
    include_age: bool = False
    seed: int | None = None
    jobs: int = 1
    texture: TextureParams = field(default_factory=TextureParams)
    thickness: ThicknessParams = field(default_factory=ThicknessParams)
    hippocampus_names: tuple = DEFAULT_HIPPOCAMPUS
    grid: dict = field(default_factory=lambda: dict(ml_harness.DEFAULT_GRID))
    k: int = 10
    test_fraction: float = 0.2
    gbt: dict = field(default_factory=dict)
    standardize: bool = True
    top_k: int = 50

    @property
    def manifest_path(self) -> Path:
        return self.manifest or self.out / "manifest.csv"

    @property
    def region_table_path(self) -> Path:
        return self.region_table or self.out / "regions.csv"

    @property
    def features_path(self) -> Path:
        return self.features_dir or self.out

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigurationError("a seed is required (config 'seed' or --seed)")
        return int(self.seed)


_PATH_KEYS = ("out", "manifest", "region_table", "features_dir", "matrix", "deep_features")


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _parse_blocks(value) -> tuple:
    items = value.split(",") if isinstance(value, str) else list(value)
    blocks = tuple(b.strip() for b in items if b.strip())
    bad = [b for b in blocks if b not in pipeline.BLOCK_ORDER]
    if bad or not blocks:
        raise ConfigurationError(f"blocks must be a nonempty subset of {list(pipeline.BLOCK_ORDER)}, got {value!r}")
    return blocks


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Config file values, then non-None ``overrides`` on top.

    Relative paths in the file resolve against the file's directory.
    """
    raw = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(
                f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        base = path.parent
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"unknown config keys {unknown}")
    for k in _PATH_KEYS:
        if raw.get(k) is not None:
            raw[k] = base / raw[k]
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = Path(v) if k in _PATH_KEYS else v
    try:
        if "texture" in raw:
            raw["texture"] = TextureParams(**_tuples(raw["texture"]))
        if "thickness" in raw:
            raw["thickness"] = ThicknessParams(**raw["thickness"])
        if "blocks" in raw:
            raw["blocks"] = _parse_blocks(raw["blocks"])
        if "task" in raw:
            raw["task"] = pipeline.canonical_task(raw["task"])
        if "hippocampus_names" in raw:
            raw["hippocampus_names"] = tuple(raw["hippocampus_names"])
        if "gbt" in raw:
            bad = sorted(set(raw["gbt"]) - set(GBT_KEYS))
            if bad:
                raise ConfigurationError(f"unknown gbt keys {bad}; allowed {list(GBT_KEYS)}")
            GBTConfig(**raw["gbt"])
        if "grid" in raw:
            ml_harness.expand_grid(raw["grid"])
        cfg = RunConfig(**raw)
    except TypeError as exc:
        raise ConfigurationError(f"invalid config: {exc}") from None
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    if cfg.jobs < 1:
        raise ConfigurationError("jobs must be >= 1")
    return cfg


# ---------------------------------------------------------------- phantom


def _phantom_jobs(d: dict, spec_path: Path, seed: int, args):
    """Yields ``(subject_id, diagnosis, age, spec, seed)`` for a spec file."""
    if "cohort" in d:
        cohort = synthetic.CohortSpec.from_dict(d["cohort"])
        for s in synthetic.cohort_subjects(cohort, seed):
            yield s.subject_id, s.diagnosis, s.age, s.spec, s.seed
    elif "subjects" in d:
        for i, entry in enumerate(d["subjects"]):
            try:
                sid = str(entry["subject_id"])
            except (KeyError, TypeError):
                raise SpecError(f"{spec_path}: subjects[{i}] needs a subject_id") from None
            body = entry.get("spec", entry)
            yield (sid, entry.get("diagnosis", "CN"), entry.get("age"), PhantomSpec.from_dict(body),
                   ml_harness.stream_seed(seed, f"phantom/{sid}"))
    else:
        sid = args.subject_id or d.get("subject_id") or spec_path.stem
        dx = args.diagnosis or d.get("diagnosis", "CN")
        age = args.age if args.age is not None else d.get("age")
        yield sid, dx, age, PhantomSpec.from_dict(d), seed


def cmd_phantom(cfg: RunConfig, args) -> int:
    seed = cfg.require_seed()
    spec_path = Path(args.spec)
    try:
        d = json.loads(spec_path.read_text())
    except FileNotFoundError:
        raise SpecError(f"spec file not found: {spec_path}") from None
    except json.JSONDecodeError as exc:
        raise SpecError(f"{spec_path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(d, dict):
        raise SpecError(f"{spec_path}: top level must be an object")
    cfg.out.mkdir(parents=True, exist_ok=True)
    table_path = cfg.region_table_path
    existing = read_region_table(table_path) if table_path.exists() else None
    n = 0
    for sid, dx, age, spec, sub_seed in _phantom_jobs(d, spec_path, seed, args):
        if dx not in pipeline.DIAGNOSES:
            raise SpecError(f"subject {sid}: diagnosis {dx!r} not in {pipeline.DIAGNOSES}")
        vol, lm = generate_phantom(spec, sub_seed)
        if existing is None:
            write_region_table(table_path, lm.regions)
            existing = lm.regions
        elif tuple(existing) != tuple(lm.regions):
            raise SpecError(f"subject {sid}: region table differs from {table_path}")
        vpath = cfg.out / f"{sid}_t1.nii"
        lpath = cfg.out / f"{sid}_labels.nii"
        write_nifti(vpath, vol)
        write_labelmap(lpath, lm)
        pipeline.append_manifest_row(
            cfg.manifest_path,
            pipeline.ManifestRow(sid, dx, None if age is None else float(age), vpath, lpath))
        log.info("phantom %s (%s) -> %s", sid, dx, vpath)
        n += 1
    log.info("wrote %d phantom(s); manifest %s", n, cfg.manifest_path)
    return EXIT_OK


# ---------------------------------------------------------------- extract


def _extract_one(row: pipeline.ManifestRow, region_table, blocks, tex, thk, hippo):
    t0 = time.perf_counter()
    try:
        out, icv = pipeline.extract_subject(row.volume_path, row.labelmap_path, region_table, blocks,
                                            tex, thk, hippo)
    except (BrainmarkersError, OSError, ValueError) as exc:
        return row.subject_id, None, None, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0
    return row.subject_id, out, icv, None, time.perf_counter() - t0


def _write_missing_csv(path, subject_ids, names, flags):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", *names])
        for sid, f in zip(subject_ids, flags):
            w.writerow([sid, *(int(b) for b in f)])


def cmd_extract(cfg: RunConfig, args) -> int:
    try:
        rows = pipeline.read_manifest(cfg.manifest_path)
    except FileNotFoundError:
        raise ConfigurationError(f"manifest not found: {cfg.manifest_path}") from None
    if not rows:
        raise ConfigurationError(f"manifest {cfg.manifest_path} lists no subjects")
    ids = [r.subject_id for r in rows]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"manifest {cfg.manifest_path} repeats subject ids")
    if not cfg.region_table_path.exists():
        raise ConfigurationError(f"region table not found: {cfg.region_table_path}")
    blocks = [b for b in IMAGE_BLOCKS if b in cfg.blocks]
    if "deep" in cfg.blocks:
        log.info("deep block is ingested at assembly, not extracted")
    out_dir = cfg.features_path
    out_dir.mkdir(parents=True, exist_ok=True)

    work = [(r, cfg.region_table_path, blocks, cfg.texture, cfg.thickness, cfg.hippocampus_names) for r in rows]
    results = []
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            for i, res in enumerate(ex.map(_extract_one, *zip(*work)), start=1):
                _log_progress(i, len(rows), res)
                results.append(res)
    else:
        for i, w in enumerate(work, start=1):
            res = _extract_one(*w)
            _log_progress(i, len(rows), res)
            results.append(res)

    done = [(sid, out, icv) for sid, out, icv, err, _ in results if err is None]
    failed = [(sid, err) for sid, _, _, err, _ in results if err is not None]
    with open(out_dir / "subjects.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "diagnosis", "age", "icv"])
        by_id = {r.subject_id: r for r in rows}
        for sid, _, icv in done:
            r = by_id[sid]
            w.writerow([sid, r.diagnosis, "" if r.age is None else repr(float(r.age)),
                        pipeline.FLOAT_FMT.format(icv)])
    for b in blocks:
        if not done:
            break
        sids = [sid for sid, _, _ in done]
        names = done[0][1][b].names
        pipeline.write_block_csv(out_dir / f"{b}.csv", sids, names, [out[b].values for _, out, _ in done])
        if b in MISSING_BLOCKS:
            step = len(names) // len(done[0][1][b].missing)
            region_cols = [n.rsplit("_", 1)[0] if b == "radiomics" else n.rsplit("_thk_", 1)[0]
                           for n in names[::step]]
            _write_missing_csv(out_dir / f"{b}_missing.csv", sids, [f"{c}_missing" for c in region_cols],
                               [out[b].missing for _, out, _ in done])
        log.info("wrote %s (%d subjects x %d columns)", out_dir / f"{b}.csv", len(done), len(names))
    if failed:
        for sid, err in failed:
            log.error("subject %s failed: %s", sid, err)
        log.error("%d of %d subjects failed", len(failed), len(rows))
        return EXIT_RUNTIME
    return EXIT_OK


def _log_progress(i, n, res):
    sid, _, _, err, dt = res
    log.info("extract [%d/%d] %s %s (%.1f s)", i, n, sid, "ok" if err is None else "FAILED", dt)


# --------------------------------------------------------------- assemble


def _read_subjects(path: Path):
    if not path.exists():
        raise ConfigurationError(f"missing subjects file: {path} (run extract first)")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [(r["subject_id"], r["diagnosis"], float(r["age"]) if r["age"] else None, float(r["icv"]))
                for r in reader]


def build_matrix(cfg: RunConfig) -> pipeline.FeatureMatrix:
    """Assemble the task matrix from extracted block CSVs (plus deep features)."""
    fdir = cfg.features_path
    subjects = _read_subjects(fdir / "subjects.csv")
    positive, negative = pipeline.TASKS[cfg.task]
    subjects = [s for s in subjects if s[1] in (positive, negative)]
    tables = {}
    for b in cfg.blocks:
        if b == "deep":
            if cfg.deep_features is None:
                raise ConfigurationError("block 'deep' requested but no deep_features file configured")
            if not Path(cfg.deep_features).exists():
                raise ConfigurationError(f"missing block file: {cfg.deep_features}")
            vals = pipeline.import_deep_features(cfg.deep_features)
            tables[b] = (pipeline.deep_column_names(), vals)
        else:
            p = fdir / f"{b}.csv"
            if not p.exists():
                raise ConfigurationError(f"missing block file: {p}")
            tables[b] = pipeline.read_block_csv(p)
    records = []
    for sid, dx, age, icv in subjects:
        blocks = {}
        for b, (names, vals) in tables.items():
            if sid not in vals:
                raise AssemblyError(f"subject {sid} is missing block {b!r}")
            blocks[b] = pipeline.FeatureBlock(vals[sid], names, b)
        rec = pipeline.SubjectRecord(sid, dx, age, blocks)
        records.append(pipeline.normalize_blocks(rec, icv))
    return pipeline.assemble(records, cfg.task, cfg.blocks, cfg.include_age)


def cmd_assemble(cfg: RunConfig, args) -> int:
    m = build_matrix(cfg)
    path = cfg.matrix or cfg.out / "matrix.csv"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pipeline.write_matrix_csv(path, m)
    log.info("wrote %s (%d subjects x %d columns, task %s)", path, m.shape[0], m.shape[1], m.task)
    return EXIT_OK


# ------------------------------------------------------------- train-eval


def train_eval(cfg: RunConfig, m: pipeline.FeatureMatrix):
    seed = cfg.require_seed()
    base = GBTConfig(**cfg.gbt)
    try:
        report, folds, split = ml_harness.run_protocol(
            m.values, m.labels, cfg.grid, cfg.k, seed, cfg.test_fraction, list(m.column_names), base,
            cfg.standardize, jobs=cfg.jobs)
    except (StratificationError, DegenerateInputError) as exc:
        n_pos = int(m.labels.sum())
        raise DegenerateInputError(
            f"{exc}. The task has {n_pos} positive and {len(m.labels) - n_pos} negative subjects; "
            f"each class needs enough subjects for a {cfg.test_fraction:g} test split and {cfg.k} folds "
            f"(reduce 'k' or add subjects)") from None
    report.top_k = cfg.top_k
    report.meta.update({"task": m.task, "n_subjects": int(m.shape[0]), "include_age": cfg.include_age,
                        "columns_head": list(m.column_names[:3]),
                        "gbt": {k: getattr(base, k) for k in GBT_KEYS}, "top_k": cfg.top_k})
    return report, folds, split


def cmd_train_eval(cfg: RunConfig, args) -> int:
    cfg.require_seed()
    if cfg.matrix is not None:
        if not Path(cfg.matrix).exists():
            raise ConfigurationError(f"missing matrix file: {cfg.matrix}")
        m = pipeline.read_matrix_csv(cfg.matrix)
        if m.task != cfg.task:
            raise ConfigurationError(f"matrix {cfg.matrix} is for task {m.task}, config asks for {cfg.task}")
    else:
        m = build_matrix(cfg)
    report, _, _ = train_eval(cfg, m)
    cfg.out.mkdir(parents=True, exist_ok=True)
    ml_harness.write_report_json(cfg.out / "report.json", report)
    ml_harness.write_roc_csv(cfg.out / "roc.csv", report.roc_points)
    ml_harness.write_importance_csv(cfg.out / "importance.csv", report.importance, cfg.top_k)
    s = report.summary
    log.info("test accuracy %.3f +/- %.3f, AUC %.3f +/- %.3f over %d folds",
             s["accuracy"]["mean"], s["accuracy"]["sd"], s["auc"]["mean"], s["auc"]["sd"], report.n_folds)
    return EXIT_OK


# ------------------------------------------------------------------- main


COMMANDS = {"phantom": cmd_phantom, "extract": cmd_extract, "assemble": cmd_assemble,
            "train-eval": cmd_train_eval}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--task", help="ad-vs-cn or mci-vs-cn")
    common.add_argument("--blocks", help="comma-separated subset of radiomics,texture,thickness,deep")
    common.add_argument("--include-age", action="store_true", default=None)
    common.add_argument("--top-k", type=int, help="rows in the importance CSV (default 50)")
    common.add_argument("--manifest", help="subject manifest CSV (default <out>/manifest.csv)")
    common.add_argument("--region-table", help="region table CSV (default <out>/regions.csv)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="brainmarkers", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    ph = sub.add_parser("phantom", parents=[common], help="generate phantom volumes and manifest rows")
    ph.add_argument("spec", help="phantom, subject-list or cohort spec JSON")
    ph.add_argument("--subject-id")
    ph.add_argument("--diagnosis", choices=pipeline.DIAGNOSES)
    ph.add_argument("--age", type=float)
    sub.add_parser("extract", parents=[common], help="per-subject radiomics/texture/thickness CSVs")
    sub.add_parser("assemble", parents=[common], help="write the task feature matrix")
    sub.add_parser("train-eval", parents=[common], help="nested CV, report.json, roc.csv, importance.csv")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", force=True)
    overrides = {"seed": args.seed, "jobs": args.jobs, "out": args.out, "task": args.task,
                 "blocks": args.blocks, "include_age": args.include_age, "top_k": args.top_k,
                 "manifest": args.manifest, "region_table": args.region_table}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (ConfigurationError, SpecError, UsageError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (BrainmarkersError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
