"""Command-line front end: ``brainseg <command> --config cfg.json --out DIR``.

Config file (UTF-8 JSON)::

    {
      "seed": 7,
      "output": "runs/demo",
      "data": {
        "manifest": "runs/demo/manifest.json",
        "phantoms": {"base": {...PhantomSpec...},
                     "groups": [{"prefix": "clean", "n": 5},
                                {"prefix": "bad", "n": 5, "overrides": {"bias_amplitude": 0.8}}],
                     "split": {"train": 6, "test": 4}}
      },
      "model": {...UNetConfig...},
      "train": {...TrainConfig...},
      "eval": {"checkpoint": "model.ckpt", "ids": [...]},
      "selection": {"pool": [...], "candidates": {...}, "eval": [...],
                    "base_train": [...], "unlabeled": [...], "probe": [...],
                    "fixed_epochs": 50, "k": 2}
    }

Id lists in ``eval`` and ``selection`` may be replaced by a role name from
the manifest split (``"ids": "test"``).

Seeds: the top-level seed (or ``--seed``) fans out to component seeds as
``default_rng([seed, stream]).integers(2**31)`` with streams phantoms=1,
model=2, train=3, selection=4.  A seed written explicitly inside a section
wins over the derived one.

Every file written carries the sha256 of the canonical config.  Files are
written under a temporary name and renamed on success; a lockfile keeps two
invocations out of the same output directory.
"""

import argparse
import contextlib
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, gradcheck, model as unet, plotting, selection, training
from .metrics import CSV_COLUMNS, evaluate_volume, mean_record
from .volume import (PhantomSpec, load_split, load_volume, make_split, phantom_generate,
                     phantom_series, save_volume)

log = logging.getLogger("brainseg")

SEED_STREAMS = {"phantoms": 1, "model": 2, "train": 3, "selection": 4}
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_LOCKED = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config


def derive_seed(seed, component):
    return int(np.random.default_rng([seed, SEED_STREAMS[component]]).integers(2 ** 31))


def config_hash(cfg):
    """sha256 of the canonical JSON; the output location is not part of the experiment."""
    cfg = {k: v for k, v in cfg.items() if k != "output"}
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _dataclass_from(cls, section, what):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"{what}: unknown keys {unknown}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}") from None


class Experiment:
    """A parsed config with CLI overrides applied."""

    def __init__(self, raw, seed=None, out=None, base_dir="."):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        raw = json.loads(json.dumps(raw))
        if seed is not None:
            raw["seed"] = seed
        if out is not None:
            raw["output"] = str(out)
        raw.setdefault("seed", 0)
        if not isinstance(raw["seed"], int) or raw["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        self.raw = raw
        self.seed = raw["seed"]
        self.base_dir = Path(base_dir)
        self.sha256 = config_hash(raw)
        if "output" not in raw:
            raise ConfigError("no output directory: set 'output' or pass --out")
        self.out = self._path(raw["output"])

    @classmethod
    def from_file(cls, path, **overrides):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls(raw, base_dir=Path(path).parent, **overrides)

    def _path(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def section(self, name):
        if name not in self.raw or not isinstance(self.raw[name], dict):
            raise ConfigError(f"config is missing the '{name}' section")
        return self.raw[name]

    def model_config(self):
        sec = dict(self.raw.get("model", {}))
        sec.setdefault("seed", derive_seed(self.seed, "model"))
        return _dataclass_from(unet.UNetConfig, sec, "model")

    def train_config(self):
        sec = dict(self.section("train"))
        sec.setdefault("seed", derive_seed(self.seed, "train"))
        return _dataclass_from(training.TrainConfig, sec, "train")

    # -- data ---------------------------------------------------------------

    def manifest_path(self):
        data = self.raw.get("data", {})
        if "manifest" in data:
            return self._path(data["manifest"])
        return self.out / "manifest.json"

    def load_manifest(self):
        path = self.manifest_path()
        if not path.exists():
            raise ConfigError(f"manifest {path} does not exist (run phantom-gen first?)")
        doc = json.loads(path.read_text(encoding="utf-8"))
        vols = {}
        for vid, entry in doc["volumes"].items():
            img = path.parent / entry["image"]
            lab = path.parent / entry["label"] if entry.get("label") else None
            for p in (img, lab):
                if p is not None and not p.exists():
                    raise ConfigError(f"volume file {p} referenced by the manifest is missing")
            vols[vid] = (img, lab)
        split = load_split(path) if "roles" in doc else {}
        return vols, split

    def ids(self, value, split, what):
        if isinstance(value, str):
            if value not in split:
                raise ConfigError(f"{what}: role {value!r} not in the manifest split")
            return list(split[value])
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{what}: expected a role name or a non-empty id list")
        return list(value)


# ---------------------------------------------------------------------------
# output handling


class OutputDir:
    """Lockfile plus atomic temp-then-rename writes."""

    def __init__(self, path, sha256):
        self.path = Path(path)
        self.sha256 = sha256
        self._lock = None
        self.written = []

    def __enter__(self):
        try:
            self.path.mkdir(parents=True, exist_ok=True)
            probe = self.path / ".write-test"
            probe.write_bytes(b"")
            probe.unlink()
        except OSError as exc:
            raise ConfigError(f"output directory {self.path} is not writable: {exc.strerror}") \
                from None
        lock = self.path / ".lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockedError(f"{self.path} is locked by another run (remove {lock} if stale)") \
                from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        self._lock = lock
        return self

    def __exit__(self, *exc):
        if self._lock is not None:
            self._lock.unlink(missing_ok=True)
        return False

    @contextlib.contextmanager
    def atomic(self, name):
        """Yield a temporary path; rename it to ``name`` only if the block succeeds."""
        final = self.path / name
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = final.with_name(f".{final.name}.tmp")
        try:
            yield tmp
            os.replace(tmp, final)
        finally:
            tmp.unlink(missing_ok=True)
        self.written.append(final)

    def text(self, name, content):
        with self.atomic(name) as tmp:
            tmp.write_text(content, encoding="utf-8")

    def csv(self, name, content):
        self.text(name, f"# config_sha256={self.sha256}\n{content}")

    def json(self, name, doc):
        doc = dict(doc, config_sha256=self.sha256)
        self.text(name, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def figure(self, name, plot, *args):
        with self.atomic(name) as tmp:
            with open(tmp, "wb") as fh:
                plot(*args, fh)


class LockedError(RuntimeError):
    pass


def _load_pairs(vols, ids, need_labels=True):
    out = {}
    for vid in ids:
        if vid not in vols:
            raise ConfigError(f"volume {vid!r} is not in the manifest")
        img_path, lab_path = vols[vid]
        if need_labels and lab_path is None:
            raise ConfigError(f"volume {vid!r} has no label file")
        img = load_volume(img_path)
        lab = load_volume(lab_path) if lab_path is not None else None
        out[vid] = (img, lab) if need_labels else img
    return out


def _records_csv(records):
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.to_row().items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_phantom_gen(exp, out, args):
    sec = exp.section("data").get("phantoms")
    if not isinstance(sec, dict):
        raise ConfigError("config is missing data.phantoms")
    try:
        base = PhantomSpec.from_dict(sec.get("base", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"data.phantoms.base: {exc}") from None
    groups = sec.get("groups") or [{"prefix": "ph", "n": sec.get("n", 4)}]
    seed = sec.get("seed", derive_seed(exp.seed, "phantoms"))
    entries, ids = {}, []
    for g, group in enumerate(groups):
        n = int(group.get("n", 0))
        if n < 1:
            raise ConfigError(f"phantom group {g} needs n >= 1")
        specs = phantom_series(base, n, seed=[seed, g], **group.get("overrides", {}))
        for i, spec in enumerate(specs):
            try:
                spec.validate()
            except ValueError as exc:
                raise ConfigError(f"phantom group {g}: {exc}") from None
            vid = f"{group.get('prefix', f'g{g}')}{i:02d}"
            img, lab = phantom_generate(spec)
            meta = {"config_sha256": exp.sha256, "phantom": spec.to_dict()}
            for kind, vol in (("img", img), ("lab", lab)):
                with out.atomic(f"volumes/{vid}_{kind}.ntv") as tmp:
                    save_volume(vol, tmp, meta=meta)
            entries[vid] = {"image": f"volumes/{vid}_img.ntv", "label": f"volumes/{vid}_lab.ntv"}
            ids.append(vid)
    doc = {"volumes": entries}
    if "split" in sec:
        try:
            doc["roles"] = make_split(ids, sec["split"], seed=seed)
        except ValueError as exc:
            raise ConfigError(f"data.phantoms.split: {exc}") from None
    out.json("manifest.json", doc)
    print(f"wrote {len(ids)} phantom pairs to {out.path}")
    return EXIT_OK


def _train_ids(exp, split):
    return exp.ids(exp.raw.get("data", {}).get("train_ids", "train"), split, "data.train_ids")


def cmd_train(exp, out, args):
    mcfg, tcfg = exp.model_config(), exp.train_config()
    vols, split = exp.load_manifest()
    ids = _train_ids(exp, split)
    pairs = _load_pairs(vols, ids)
    model, hist = training.fit(pairs, ids, mcfg, tcfg)
    meta = {"config_sha256": exp.sha256, "best_epoch": hist.best_epoch,
            "train_ids": ids}
    with out.atomic("model.ckpt") as tmp:
        training.save_checkpoint(model, tmp, meta=meta)
    out.csv("history.csv", hist.to_csv(include_time=args.timing))
    out.json("history.json", {"best_epoch": hist.best_epoch, "stopped_early": hist.stopped_early,
                              "epochs": len(hist), "train_ids": ids})
    out.figure("history.png", plotting.plot_history, hist)
    print(f"trained {len(hist)} epochs (best {hist.best_epoch}); checkpoint {out.path / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(exp, out, args):
    sec = exp.section("eval")
    vols, split = exp.load_manifest()
    ids = exp.ids(sec.get("ids", "test"), split, "eval.ids")
    ckpt = exp._path(sec["checkpoint"]) if "checkpoint" in sec else exp.out / "model.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    model, _ = training.load_checkpoint(ckpt)
    normalize = bool(exp.raw.get("train", {}).get("normalize", False))
    records = []
    for vid, (img, lab) in _load_pairs(vols, ids).items():
        t0 = time.perf_counter()
        pred = selection.pseudo_label(model, img, normalize=normalize)
        rec = evaluate_volume(pred, lab, img.spacing, volume_id=vid)
        log.info("%s: %s voxels segmented and scored in %.2f s", vid, "x".join(map(str, img.dims)),
                 time.perf_counter() - t0)
        with out.atomic(f"predictions/{vid}_pred.ntv") as tmp:
            save_volume(pred, tmp, meta={"config_sha256": exp.sha256})
        records.append(rec)
    mean = mean_record(records)
    out.csv("metrics.csv", _records_csv(records + [mean]))
    out.json("metrics.json", {"checkpoint": str(ckpt.name),
                              "rows": [r.to_row() for r in records + [mean]]})
    out.figure("metrics.png", plotting.plot_metrics, records)
    print(f"mean tissue DSC {mean.mean_dsc:.4f} over {len(records)} volumes")
    return EXIT_OK


def _selection_common(exp):
    sec = exp.section("selection")
    mcfg, tcfg = exp.model_config(), exp.train_config()
    vols, split = exp.load_manifest()
    return sec, mcfg, tcfg, vols, split


def _write_report(out, report, exp, stem):
    report.config["config_sha256"] = exp.sha256
    out.text(f"{stem}.csv", report.to_csv())
    out.text(f"{stem}.json", report.to_json())
    out.figure(f"{stem}.png", plotting.plot_selection, report)


def cmd_select(exp, out, args):
    sec, mcfg, tcfg, vols, split = _selection_common(exp)
    if "candidates" not in sec:
        raise ConfigError("selection.candidates is required for select")
    cands = sec["candidates"]
    eval_ids = exp.ids(sec.get("eval", "test"), split, "selection.eval")
    if isinstance(cands, dict) and "n_candidates" in cands:
        pool_ids = exp.ids(sec.get("pool", "train"), split, "selection.pool")
        seed = sec.get("seed", derive_seed(exp.seed, "selection"))
    elif isinstance(cands, dict):
        cands = [selection.CandidateSubset(name, exp.ids(v, split, f"candidate {name}"))
                 for name, v in sorted(cands.items())]
        pool_ids = sorted({v for c in cands for v in c.ids})
        seed = None
    else:
        raise ConfigError("selection.candidates must map names to id lists, "
                          "or give n_candidates and size")
    try:
        report = selection.bootstrap_select(_load_pairs(vols, pool_ids), cands,
                                            _load_pairs(vols, eval_ids), mcfg, tcfg, seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _write_report(out, report, exp, "selection")
    print(f"best candidate: {report.winner}")
    return EXIT_OK


def cmd_suggest(exp, out, args):
    sec, mcfg, tcfg, vols, split = _selection_common(exp)
    base = exp.ids(sec.get("base_train", "train"), split, "selection.base_train")
    unlabeled = exp.ids(sec.get("unlabeled", "unlabeled"), split, "selection.unlabeled")
    probe = exp.ids(sec.get("probe", "probe"), split, "selection.probe")
    k = int(sec.get("k", 1))
    if not 1 <= k <= len(unlabeled):
        raise ConfigError(f"selection.k={k} must lie in 1..{len(unlabeled)} "
                          "(number of unlabeled volumes)")
    try:
        report = selection.suggest_annotations(
            _load_pairs(vols, base), _load_pairs(vols, unlabeled, need_labels=False),
            _load_pairs(vols, probe), mcfg, tcfg,
            fixed_epochs=int(sec.get("fixed_epochs", 50)), k=k)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _write_report(out, report, exp, "suggestions")
    print("suggested for annotation: " + ", ".join(report.suggested))
    return EXIT_OK


def run_gradcheck(seed=0, include_model=True, out=None):
    reports = gradcheck.run_suite(seed=seed, include_model=include_model)
    for r in reports:
        print(r)
    if out is not None:
        rows = [{"name": r.name, "max_rel_error": r.max_rel_error, "tolerance": r.tolerance,
                 "coords": r.n_checked, "passed": bool(r.passed)} for r in reports]
        buf = io.StringIO()
        w = csv.DictWriter(buf, list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        out.csv("gradcheck.csv", buf.getvalue())
        out.json("gradcheck.json", {"checks": rows})
    ok = all(r.passed for r in reports)
    print("gradcheck:", "all checks passed" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gradcheck(exp, out, args):
    return run_gradcheck(exp.seed, not args.primitives_only, out)


def cmd_info(exp, out, args):
    import scipy

    cfg = exp.model_config()
    info = {
        "brainseg": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": sys.version.split()[0],
        "seed": exp.seed,
        "derived_seeds": {c: derive_seed(exp.seed, c) for c in SEED_STREAMS},
        "model": cfg.to_dict(),
        "parameters": unet.closed_form_count(cfg),
        "config_sha256": exp.sha256,
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    if out is not None:
        out.json("info.json", info)
    return EXIT_OK


COMMANDS = {
    "phantom-gen": (cmd_phantom_gen, "generate phantom volume/label pairs and a split manifest"),
    "train": (cmd_train, "train a U-Net, write checkpoint and loss history"),
    "eval": (cmd_eval, "segment volumes with a checkpoint and score DSC/HD/AVD"),
    "select": (cmd_select, "rank candidate training subsets by held-out DSC"),
    "suggest": (cmd_suggest, "rank unlabeled volumes for annotation"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every adjoint"),
    "info": (cmd_info, "print versions, derived seeds and parameter count"),
}

# commands that may run without a config file
_CONFIG_OPTIONAL = {"gradcheck", "info"}


def build_parser():
    parser = argparse.ArgumentParser(prog="brainseg", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="experiment config (JSON)")
        p.add_argument("--out", type=Path, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="global seed (overrides config)")
        p.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
        p.add_argument("-v", "--verbose", action="count", default=0)
        if name == "train":
            p.add_argument("--timing", action="store_true",
                           help="record wall time per epoch (breaks byte-identical reruns)")
        if name == "gradcheck":
            p.add_argument("--primitives-only", action="store_true",
                           help="skip the end-to-end network check")
    return parser


def _limits(threads):
    if threads is None:
        return contextlib.nullcontext()
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2) if args.verbose
                        else logging.INFO if args.command == "eval" else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        if args.config is not None:
            exp = Experiment.from_file(args.config, seed=args.seed, out=args.out)
        elif args.command in _CONFIG_OPTIONAL:
            raw = {"output": str(args.out)} if args.out else {"output": "."}
            exp = Experiment(raw, seed=args.seed)
        else:
            raise ConfigError(f"{args.command} needs --config")
        with _limits(args.threads):
            if args.command in _CONFIG_OPTIONAL and args.out is None and args.config is None:
                return func(exp, None, args)
            with OutputDir(exp.out, exp.sha256) as out:
                return func(exp, out, args)
    except ConfigError as exc:
        print(f"brainseg {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LockedError as exc:
        print(f"brainseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except (training.TrainingError, training.CheckpointError, ValueError, OSError) as exc:
        print(f"brainseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
