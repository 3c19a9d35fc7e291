"""Training-subset selection and suggestive annotation.

Both procedures score a choice of training data by the mean tissue DSC a
freshly trained model reaches on a held-out labelled set.  Subset selection
keeps the highest-scoring candidate; suggestive annotation flags the
unlabelled volumes whose pseudo-labelled addition scores lowest.
"""

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as unet
from .losses import reconstruct_labels
from .metrics import TISSUES, hard_dsc
from .training import fit
from .volume import LabelVolume, tile_patches, untile_probabilities

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["candidate_or_volume_id", "dsc_csf", "dsc_gm", "dsc_wm", "mean_dsc", "rank",
                  "suggested"]


@dataclass
class CandidateSubset:
    subset_id: str
    ids: list

    def __post_init__(self):
        self.ids = list(self.ids)
        if not self.ids:
            raise ValueError(f"candidate {self.subset_id!r} is empty")


@dataclass
class ScoreRow:
    id: str
    dsc: dict
    mean_dsc: float
    rank: int = 0
    suggested: bool = False
    members: list = None


@dataclass
class SelectionReport:
    procedure: str                  # "bootstrap", "suggest" or "verify"
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def ascending(self):
        return self.procedure == "suggest"

    @property
    def winner(self):
        return self.rows[0].id if self.rows else None

    @property
    def suggested(self):
        return [r.id for r in self.rows if r.suggested]

    def scores(self):
        return {r.id: r.mean_dsc for r in self.rows}

    def to_csv(self):
        buf = io.StringIO()
        for key in sorted(self.config):
            buf.write(f"# {key}={json.dumps(self.config[key], sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r.id, *(repr(r.dsc[t]) for t in TISSUES.values()), repr(r.mean_dsc),
                        r.rank, str(r.suggested).lower()])
        return buf.getvalue()

    def to_dict(self):
        rows = []
        for r in self.rows:
            row = {"candidate_or_volume_id": r.id}
            row.update({f"dsc_{t}": r.dsc[t] for t in TISSUES.values()})
            row.update(mean_dsc=r.mean_dsc, rank=r.rank, suggested=r.suggested)
            if r.members is not None:
                row["members"] = list(r.members)
            rows.append(row)
        return {"procedure": self.procedure, "config": self.config, "rows": rows}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def rank_rows(rows, ascending):
    """Sort by mean DSC (ties by id) and assign ranks 1..n."""
    sign = 1 if ascending else -1
    rows = sorted(rows, key=lambda r: (sign * r.mean_dsc, r.id))
    for i, r in enumerate(rows, 1):
        r.rank = i
    return rows


def pseudo_label(model, image, axis=0, patch_size=64, normalize=False, batch_size=16):
    """Tile, predict and reassemble one volume into argmax labels."""
    ps = tile_patches(image, axis=axis, patch_size=patch_size, normalize=normalize)
    probs = unet.predict(model, ps.images(), batch_size)
    vol = untile_probabilities(ps, probs)
    return LabelVolume(reconstruct_labels(vol[None])[0], image.spacing)


def score_model(model, eval_set, normalize=False):
    """Per-volume DSC averaged over volumes per tissue, then over tissues."""
    per_class = {t: [] for t in TISSUES.values()}
    for vid in sorted(eval_set):
        img, lab = eval_set[vid]
        pred = pseudo_label(model, img, normalize=normalize)
        for cid, name in TISSUES.items():
            per_class[name].append(hard_dsc(pred, lab, cid))
    dsc = {t: float(np.mean(v)) for t, v in per_class.items()}
    return dsc, float(np.mean(list(dsc.values())))


def sample_candidates(pool_ids, n_candidates, size, seed):
    """Bootstrap candidates: ``size`` ids drawn with replacement, sorted for readability."""
    pool_ids = sorted(pool_ids)
    rng = np.random.default_rng(seed)
    return [CandidateSubset(f"sample{i + 1}",
                            sorted(pool_ids[j] for j in rng.integers(len(pool_ids), size=size)))
            for i in range(n_candidates)]


def _check_disjoint(ids, other, what):
    overlap = sorted(set(ids) & set(other))
    if overlap:
        raise ValueError(f"{what} overlaps the evaluation set: {', '.join(map(str, overlap))}")


def _score_subsets(pool, subsets, eval_set, model_config, train_config):
    rows = []
    for sub in subsets:
        missing = [v for v in sub.ids if v not in pool]
        if missing:
            raise ValueError(f"candidate {sub.subset_id!r} names unknown volumes: {missing}")
        _check_disjoint(sub.ids, eval_set, f"candidate {sub.subset_id!r}")
    for sub in subsets:
        model, _ = fit(pool, sub.ids, model_config, train_config)
        dsc, mean = score_model(model, eval_set, train_config.normalize)
        log.info("candidate %s: mean tissue DSC %.4f", sub.subset_id, mean)
        rows.append(ScoreRow(sub.subset_id, dsc, mean, members=list(sub.ids)))
    return rows


def bootstrap_select(pool, candidates, eval_set, model_config, train_config, seed=None):
    """Rank candidate training subsets by held-out mean tissue DSC, best first.

    ``candidates`` is a list of CandidateSubset (explicit mode) or a dict
    ``{"n_candidates": int, "size": int}`` for sampling with replacement.
    """
    mode = "explicit"
    if isinstance(candidates, dict):
        mode = "sampled"
        seed = train_config.seed if seed is None else seed
        candidates = sample_candidates(list(pool), candidates["n_candidates"],
                                       candidates["size"], seed)
    rows = rank_rows(_score_subsets(pool, candidates, eval_set, model_config, train_config),
                     ascending=False)
    rows[0].suggested = True
    config = {"candidate_mode": mode, "seed": train_config.seed,
              "fixed_epochs": train_config.max_epochs if train_config.fixed_epochs else None}
    return SelectionReport("bootstrap", rows, config)


def suggest_annotations(base_train, unlabeled, probe_set, model_config, train_config,
                        fixed_epochs=50, k=1):
    """Rank unlabelled volumes by the probe DSC of a model retrained with their pseudo-labels.

    ``base_train`` and ``probe_set`` map ids to (Volume, LabelVolume);
    ``unlabeled`` maps ids to Volume.  The ``k`` lowest-scoring volumes are
    suggested for annotation.
    """
    if not 1 <= k <= len(unlabeled):
        raise ValueError(f"k={k} must lie in 1..{len(unlabeled)} (number of unlabeled volumes)")
    _check_disjoint(base_train, probe_set, "base training set")
    _check_disjoint(unlabeled, probe_set, "unlabeled set")
    clash = sorted(set(base_train) & set(unlabeled))
    if clash:
        raise ValueError(f"volumes both labelled and unlabelled: {clash}")

    base_model, _ = fit(base_train, list(base_train), model_config, train_config)
    retrain = replace(train_config, fixed_epochs=True, max_epochs=fixed_epochs)
    rows = []
    for uid in sorted(unlabeled):
        img = unlabeled[uid]
        pool = dict(base_train)
        pool[uid] = (img, pseudo_label(base_model, img, normalize=train_config.normalize))
        model, _ = fit(pool, list(base_train) + [uid], model_config, retrain)
        dsc, mean = score_model(model, probe_set, train_config.normalize)
        log.info("unlabeled %s: probe mean tissue DSC %.4f", uid, mean)
        rows.append(ScoreRow(uid, dsc, mean))
    rows = rank_rows(rows, ascending=True)
    for r in rows[:k]:
        r.suggested = True
    config = {"candidate_mode": "suggest", "seed": train_config.seed,
              "fixed_epochs": fixed_epochs, "k": k}
    return SelectionReport("suggest", rows, config)


def verify_selection(pool, subsets, eval_set, model_config, train_config):
    """Train one model per named subset and tabulate eval DSC, best first."""
    if isinstance(subsets, dict):
        subsets = [CandidateSubset(name, ids) for name, ids in subsets.items()]
    rows = rank_rows(_score_subsets(pool, subsets, eval_set, model_config, train_config),
                     ascending=False)
    config = {"candidate_mode": "verify", "seed": train_config.seed,
              "fixed_epochs": train_config.max_epochs if train_config.fixed_epochs else None}
    return SelectionReport("verify", rows, config)
