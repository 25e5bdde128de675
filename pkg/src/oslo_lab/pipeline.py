"""End-to-end runs: data -> models -> OSLO sweep -> baselines -> analyses -> defences.

Every random stream is derived from the run seed and a stage name
(``stage_seed``), so any stage can be rerun on its own and reproduce the
artifacts of a full run. Artifacts live under ``cfg.out``; ``summary.json``
holds headline metrics and deterministic work counts, ``manifest.json``
holds checksums, seeds and wall-clock times.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import analysis as A
from . import baselines as B
from . import defenses as D
from . import models as M
from . import oslo as O
from .config import ExperimentConfig, dump_config
from .data import LabeledDataset, SplitPlan, load_idx_dataset, make_split, synth_dataset
from .metrics import (MetricCurve, QueryRecord, ScoredPanel, curve_tpr_at_fpr, decision_point,
                      max_precision_at_recall, query_report, roc_points)
from .svg import line_chart
from .transfer import AdmixPool, SourceEnsemble

log = logging.getLogger(__name__)

SUMMARY_FPR_CAPS = (0.001, 0.01)


class PipelineError(RuntimeError):
    """A stage failed; ``manifest`` is the partial manifest that was written."""

    def __init__(self, message: str, manifest: "RunManifest"):
        super().__init__(message)
        self.manifest = manifest


def stage_seed(root: int, stage: str) -> int:
    """32-bit seed for ``stage``: the stage name is hashed into the stream index."""
    idx = int.from_bytes(hashlib.sha256(stage.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([int(root) & 0xFFFFFFFF, idx]).generate_state(1)[0])


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    seeds: Dict[str, int] = field(default_factory=dict)
    model_checksums: Dict[str, str] = field(default_factory=dict)
    wall_times: Dict[str, float] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)
    failure: Optional[Dict[str, str]] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


def verify_manifest(out_dir) -> List[str]:
    """Artifacts that are missing or whose checksum no longer matches."""
    out = Path(out_dir)
    man = RunManifest.from_json((out / "manifest.json").read_text())
    bad = []
    for rel, digest in sorted(man.artifacts.items()):
        p = out / rel
        if not p.exists() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


@dataclass
class OsloRun:
    """Archived single-shot sweep: traces per tau plus the extra stop rules."""
    curve: MetricCurve
    traces: Dict[object, List[O.AdvTrace]]
    flags: Dict[float, np.ndarray]
    queries_per_tau: int
    flip_queries: int
    label_flip_flags: Optional[np.ndarray] = None


class Lab:
    """Lazily materialised experiment state for one config; each stage persists its outputs."""

    def __init__(self, cfg: ExperimentConfig, manifest: Optional[RunManifest] = None):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.manifest = manifest or RunManifest(cfg.config_hash())
        self.work: Dict[str, Dict[str, int]] = {}
        self._data: Optional[LabeledDataset] = None
        self._split: Optional[SplitPlan] = None
        self._models: Dict[str, M.ModelHandle] = {}
        self._oslo: Optional[OsloRun] = None
        self.summary_metrics: Dict[str, Dict[str, object]] = {}
        O.set_default_jobs(cfg.pipeline.jobs)

    # -- bookkeeping ---------------------------------------------------------

    def seed(self, stage: str) -> int:
        s = stage_seed(self.cfg.seed, stage)
        self.manifest.seeds[stage] = s
        return s

    def write(self, rel: str, text: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        self.manifest.artifacts[rel] = sha256_file(p)
        return p

    def count(self, stage: str, key: str, n: int) -> None:
        self.work.setdefault(stage, {})
        self.work[stage][key] = self.work[stage].get(key, 0) + int(n)

    # -- data ----------------------------------------------------------------

    @property
    def data(self) -> LabeledDataset:
        if self._data is None:
            d = self.cfg.data
            if d.source == "idx":
                self._data = load_idx_dataset(d.images_path, d.labels_path, d.num_classes)
            else:
                self._data = synth_dataset(d.synth_spec(), seed=self.seed("data"))
        return self._data

    @property
    def split(self) -> SplitPlan:
        if self._split is None:
            sizes = asdict(self.cfg.split)
            self._split = make_split(len(self.data), sizes, seed=self.seed("split"))
        return self._split

    def subset(self, name: str) -> LabeledDataset:
        return self.data.subset(getattr(self.split, name), name)

    @property
    def test_data(self) -> LabeledDataset:
        idx = self.split.holdout if len(self.split.holdout) else self.split.eval_nonmembers
        return self.data.subset(idx, "test")

    @property
    def panel(self) -> O.Panel:
        return O.Panel.from_split(self.data, self.split)

    def stage_data(self) -> None:
        h = hashlib.sha256(np.ascontiguousarray(self.data.images).tobytes()
                           + self.data.labels.astype("<i8").tobytes()).hexdigest()
        self.write("data/split.json", self.split.to_json() + "\n")
        self.write("data/dataset.json", json.dumps({"samples": len(self.data), "sha256": h,
                                                    "num_classes": self.data.num_classes,
                                                    "image_shape": list(self.data.image_shape)},
                                                   sort_keys=True) + "\n")
        self.count("data", "samples", len(self.data))

    # -- models --------------------------------------------------------------

    def roles(self) -> List[Tuple[str, M.ArchSpec, str]]:
        """(role name, arch, training subset) for every model the attack needs."""
        out = [("target", self.cfg.target.arch(), "target_train")]
        for fam, i in self.cfg.source.members():
            out.append((f"source-{fam}-{i}", M.ArchSpec(fam), "surrogate_train"))
        for fam, i in self.cfg.validation.members():
            out.append((f"validation-{fam}-{i}", M.ArchSpec(fam), "surrogate_train"))
        return out

    def _train_or_load(self, role: str, arch: M.ArchSpec, subset: str, train_cfg: M.TrainConfig,
                       trainer=None) -> M.ModelHandle:
        if role in self._models:
            return self._models[role]
        path = self.out / "models" / f"{role}.bin"
        key = hashlib.sha256(json.dumps({"arch": asdict(arch), "train": asdict(train_cfg), "subset": subset,
                                         "split": self.split.to_json(), "data": self.cfg.to_dict()["data"],
                                         "data_seed": self.seed("data")},
                                        sort_keys=True).encode()).hexdigest()
        model = None
        if path.exists():
            try:
                cached = M.load(path)
                if cached.train_meta.get("cache_key") == key:
                    model = cached
            except M.ModelFormatError:
                model = None
        if model is None:
            data = self.subset(subset)
            model = trainer(data) if trainer else M.train(arch, data, train_cfg, extra_meta={"cache_key": key})
            model.train_meta["cache_key"] = key
            path.parent.mkdir(parents=True, exist_ok=True)
            M.save(model, path)
        self.manifest.artifacts[f"models/{role}.bin"] = sha256_file(path)
        self.manifest.model_checksums[role] = model.checksum()
        self.count("train", "epochs", train_cfg.epochs)
        self.count("train", "models", 1)
        self._models[role] = model
        return model

    def model(self, role: str) -> M.ModelHandle:
        for name, arch, subset in self.roles():
            if name == role:
                return self._train_or_load(name, arch, subset, self.cfg.train.train_config(self.seed(f"train/{name}")))
        raise KeyError(role)

    def stage_train(self) -> None:
        rows = []
        for name, _, subset in self.roles():
            m = self.model(name)
            rows.append((name, m.arch.family, M.accuracy(m, self.subset(subset)), M.accuracy(m, self.test_data)))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["role", "family", "train_acc", "test_acc"])
        for r in rows:
            w.writerow([r[0], r[1], repr(float(r[2])), repr(float(r[3]))])
        self.write("models/accuracy.csv", buf.getvalue())

    @property
    def target(self) -> M.ModelHandle:
        return self.model("target")

    @property
    def sources(self) -> SourceEnsemble:
        return SourceEnsemble([self.model(f"source-{f}-{i}") for f, i in self.cfg.source.members()])

    @property
    def validators(self) -> O.ValidationEnsemble:
        return O.ValidationEnsemble([self.model(f"validation-{f}-{i}") for f, i in self.cfg.validation.members()])

    @property
    def admix_pool(self) -> Optional[AdmixPool]:
        if "Admix" not in self.cfg.attack.method_params().methods:
            return None
        sur = self.subset("surrogate_train")
        return AdmixPool(sur.images, sur.labels)

    # -- OSLO ----------------------------------------------------------------

    def oslo(self) -> OsloRun:
        if self._oslo is not None:
            return self._oslo
        a = self.cfg.attack
        panel = self.panel
        extra = [O.LABEL_FLIP] + ([O.TARGET_FLIP] if a.target_flip_search else [])
        oracle = O.TargetOracle(self.target)
        flip_oracle = O.TargetOracle(self.target)
        res = O.sweep_tau(panel, oracle, self.sources, self.validators, a.attack_config(), a.taus,
                          seed=self.seed("attack"), admix_pool=self.admix_pool, extra_rules=extra,
                          flip_oracle=flip_oracle if a.target_flip_search else None)
        flags = {t: np.array([d.member for d in res.decisions[t]]) for t in a.taus}
        per_tau = res.queries // len(a.taus)
        query_report([QueryRecord("oslo", per_tau, len(panel), 1)])
        self._oslo = OsloRun(res.curve, res.traces, flags, per_tau, flip_oracle.queries)
        steps = sum(max((t.stop_stage - 1) * a.iterations + t.stop_iteration for t in per_sample)
                    for per_sample in zip(*res.traces.values()))
        self.count("attack", "samples", len(panel))
        self.count("attack", "target_queries", res.queries)
        self.count("attack", "flip_search_queries", flip_oracle.queries)
        self.count("attack", "trace_steps", steps)
        return self._oslo

    def stage_attack(self) -> None:
        run = self.oslo()
        self.write("oslo/curve.csv", run.curve.to_csv())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "is_member"] + [f"tau={t:g}" for t in self.cfg.attack.taus])
        for i, sid in enumerate(self.panel.ids):
            w.writerow([int(sid), int(self.panel.is_member[i])] + [int(run.flags[t][i]) for t in self.cfg.attack.taus])
        self.write("oslo/decisions.csv", buf.getvalue())
        for key, traces in run.traces.items():
            name = key if isinstance(key, str) else f"tau={key:g}"
            p = self.out / "oslo" / "traces" / f"{name}.jsonl"
            p.parent.mkdir(parents=True, exist_ok=True)
            O.write_traces(p, traces)
            self.manifest.artifacts[f"oslo/traces/{name}.jsonl"] = sha256_file(p)
        self.summary_metrics["oslo"] = {
            "tpr_at_fpr_0001": curve_tpr_at_fpr(run.curve, 0.001),
            "tpr_at_fpr_001": curve_tpr_at_fpr(run.curve, 0.01),
            "max_precision_recall_ge_001": max_precision_at_recall(run.curve, 0.01),
            "queries": run.queries_per_tau,
        }
        lf = O.infer_membership(self.target, run.traces["label-flip"])
        run.label_flip_flags = np.array([d.member for d in lf])
        p = decision_point(run.label_flip_flags, self.panel.is_member, 0.0)
        self.summary_metrics["oslo-label-flip"] = {
            "tpr_at_fpr_0001": p.tpr if p.fpr is not None and p.fpr <= 0.001 else 0.0,
            "tpr_at_fpr_001": p.tpr if p.fpr is not None and p.fpr <= 0.01 else 0.0,
            "max_precision_recall_ge_001": p.precision if (p.recall or 0) >= 0.01 else None,
            "queries": len(lf),
        }
        self.count("attack", "target_queries", len(lf))
        svg = line_chart({"oslo": ([pt.fpr for pt in run.curve.points], [pt.tpr for pt in run.curve.points])},
                         "OSLO tau sweep", "FPR", "TPR", log_x=True)
        self.write("plots/oslo_roc.svg", svg)

    # -- baselines -----------------------------------------------------------

    def baseline(self, name: str) -> B.BaselineScores:
        bc = self.cfg.baselines.baseline_config()
        panel = self.panel
        if name == "gaussian":
            return B.gaussian_scores(self.target, panel, bc.gaussian, seed=self.seed("baseline/gaussian"))
        if name == "augmentation":
            return B.augmentation_scores(self.target, panel, bc.augmentation)
        if name == "shadow":
            from dataclasses import replace
            train = replace(self.cfg.train.train_config(self.seed("baseline/shadow")),
                            epochs=self.cfg.baselines.shadow_epochs)
            sc = replace(bc.shadow, train=train)
            return B.shadow_transfer_scores(self.target, self.subset("surrogate_train"), sc, panel)
        if name == "global-threshold":
            run = self.oslo()
            if "target-flip" not in run.traces:
                raise ValueError("global-threshold baseline needs attack.target_flip_search = true")
            return B.global_threshold_scores(run.traces["target-flip"], panel.is_member)
        raise ValueError(f"unknown baseline {name!r}")

    def stage_baselines(self, names=None) -> None:
        curves = {}
        for name in names or self.cfg.baselines.enabled:
            s = self.baseline(name)
            self.write(f"baselines/{name}.csv", s.to_csv())
            curve = roc_points(ScoredPanel(s.ids, s.scores, s.is_member))
            self.write(f"baselines/{name}_roc.csv", curve.to_csv())
            curves[name] = curve
            self.summary_metrics[name] = {
                "tpr_at_fpr_0001": curve_tpr_at_fpr(curve, 0.001),
                "tpr_at_fpr_001": curve_tpr_at_fpr(curve, 0.01),
                "max_precision_recall_ge_001": max_precision_at_recall(curve, 0.01),
                "queries": s.total_queries,
            }
            self.count("baselines", f"{name}_queries", s.total_queries)
        if curves:
            svg = line_chart({k: ([p.fpr for p in c.points], [p.tpr for p in c.points]) for k, c in curves.items()},
                             "Baseline ROC", "FPR", "TPR")
            self.write("plots/baselines_roc.svg", svg)

    # -- analyses ------------------------------------------------------------

    def stage_analysis(self) -> None:
        a, an = self.cfg.attack, self.cfg.analysis
        run = self.oslo()
        panel = self.panel
        acfg = a.attack_config()
        parts = []
        if "target-flip" in run.traces:
            mags = np.array([t.perturbation_linf for t in run.traces["target-flip"]])
            rows = A.matched_fraction_comparison(run.flags, mags, panel.is_member, an.matched_fraction)
            parts.append(A.rows_to_markdown(rows, "Matched flagged fraction"))
            self.write("analysis/matched_fraction.csv", A.rows_to_csv(rows))
            mm, mn, p = A.membership_signal_test(mags, panel.is_member)
            parts.append(f"### Perturbation to flip the target\n\nmember mean {mm:.4g}, non-member mean {mn:.4g}, "
                         f"one-sided rank-sum p = {p:.3g}\n")
        cal = self.subset("calibration")
        if len(cal):
            res = O.calibrate_tau(a.calibration_fpr, cal.images, cal.labels, self.target, self.sources,
                                  self.validators, acfg, seed=self.seed("calibrate"),
                                  sample_ids=self.split.calibration)
            self.count("analysis", "calibration_queries", len(cal) * len(res.failure_rates))
            parts.append(f"### Tau calibration\n\ntarget FPR {a.calibration_fpr:g} -> tau {res.tau:g} "
                         f"(achievable: {res.achievable})\n")
            self.write("analysis/calibration.json", json.dumps(
                {"tau": res.tau, "achievable": res.achievable,
                 "failure_rates": {f"{k:g}": v for k, v in res.failure_rates.items()}}, sort_keys=True) + "\n")
            if an.ablation:
                small, medium, large = A.calibrate_uniform_grid(cal.images, cal.labels, self.sources,
                                                                self.validators, acfg, self.seed("calibrate"),
                                                                an.ablation_coverage)
                eps = [acfg.radius(s) for s in (small, medium, large)]
                rows = A.uniform_budget_ablation(panel, self.target, self.sources, acfg, eps, self.seed("ablation"))
                self.count("analysis", "ablation_queries", sum(r.queries for r in rows))
                parts.append(A.rows_to_markdown(rows, "Uniform budget without validation models"))
                self.write("analysis/uniform_ablation.csv", A.rows_to_csv(rows))
        modes = {f"tau={t:g}": run.traces[t] for t in a.taus}
        modes["label-flip"] = run.traces["label-flip"]
        flags = {f"tau={t:g}": run.flags[t] for t in a.taus}
        if run.label_flip_flags is not None:
            flags["label-flip"] = run.label_flip_flags
        rows = A.stop_mode_rows(panel, modes, self.target, flags)
        parts.append(A.rows_to_markdown(rows, "Stopping rules"))
        self.write("analysis/stop_modes.csv", A.rows_to_csv(rows))
        shots = min(a.max_shots, len(a.taus))
        rows = A.multishot_study(panel, self.target, {t: run.traces[t] for t in a.taus}, a.taus, shots)
        parts.append(A.rows_to_markdown(rows, "Multi-shot"))
        self.write("analysis/multishot.csv", A.rows_to_csv(rows))
        self.write("analysis/report.md", "## Analyses\n\n" + "\n".join(parts))

    # -- defences ------------------------------------------------------------

    def stage_defend(self) -> None:
        dc, a = self.cfg.defenses, self.cfg.attack
        rows = []
        base_seed = self.seed("train/target")
        train_cfg = self.cfg.train.train_config(base_seed)
        panel = self.panel
        for kind in dc.kinds:
            for param in dc.grid(kind):
                def_cfg = D.DefenseConfig(kind, param, clip=dc.dpsgd_clip, pgd_steps=dc.pgd_steps)
                dm = D.train_defended(self.cfg.target.arch(), self.subset("target_train"), train_cfg, def_cfg,
                                      self.test_data)
                res = O.sweep_tau(panel, dm.model, self.sources, self.validators, a.attack_config(), a.taus,
                                  seed=self.seed("attack"), admix_pool=self.admix_pool)
                rows.append(D.DefenseRow(kind, param, dm.test_acc, curve_tpr_at_fpr(res.curve, 0.01)))
                self.write(f"defenses/{kind}-{param:g}_curve.csv", res.curve.to_csv())
                if dm.clip_norms is not None:
                    self.write(f"defenses/{kind}-{param:g}_clip_norms.json",
                               json.dumps({"count": int(dm.clip_norms.size), "max": float(dm.clip_norms.max()),
                                           "clip": dc.dpsgd_clip}, sort_keys=True) + "\n")
                self.count("defend", "models", 1)
                self.count("defend", "target_queries", res.queries)
        self.write("defenses/defenses.csv", D.defense_csv(rows))

    # -- summary -------------------------------------------------------------

    def summary(self) -> dict:
        return {"config_hash": self.manifest.config_hash, "metrics": self.summary_metrics, "timings": self.work}


STAGE_METHODS = {
    "data": Lab.stage_data,
    "train": Lab.stage_train,
    "attack": Lab.stage_attack,
    "baselines": Lab.stage_baselines,
    "analysis": Lab.stage_analysis,
    "defend": Lab.stage_defend,
}


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def _run_stage(lab: Lab, name: str) -> None:
    if name.startswith("baselines:"):
        lab.stage_baselines([name.split(":", 1)[1]])
    elif name in STAGE_METHODS:
        STAGE_METHODS[name](lab)
    else:
        raise ValueError(f"unknown stage {name!r}")


def _merge_previous(lab: Lab, out: Path, partial: bool) -> None:
    """Partial runs (single CLI stages) extend an existing summary/manifest for the same config."""
    if not partial:
        return
    s, m = out / "summary.json", out / "manifest.json"
    if s.exists():
        prev = json.loads(s.read_text())
        if prev.get("config_hash") == lab.manifest.config_hash:
            for k, v in prev.get("metrics", {}).items():
                lab.summary_metrics.setdefault(k, v)
            for k, v in prev.get("timings", {}).items():
                lab.work.setdefault(k, v)
    if m.exists():
        prev = RunManifest.from_json(m.read_text())
        if prev.config_hash == lab.manifest.config_hash:
            for attr in ("seeds", "model_checksums", "wall_times", "artifacts"):
                merged = dict(getattr(prev, attr))
                merged.update(getattr(lab.manifest, attr))
                setattr(lab.manifest, attr, merged)


def run_pipeline(cfg: ExperimentConfig, stages=None) -> RunManifest:
    """Run ``stages`` (default: the configured list) in order and persist everything.

    Stage names are those of ``STAGE_METHODS`` plus ``baselines:<name>``. On
    failure a partial manifest with a failure record is still written and
    ``PipelineError`` is raised.
    """
    lab = Lab(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    lab.write("config.toml", dump_config(cfg))
    names = list(stages) if stages is not None else list(cfg.pipeline.stages)
    for name in names:
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            _run_stage(lab, name)
        except Exception as e:
            lab.manifest.wall_times[name] = time.perf_counter() - t0
            lab.manifest.failure = {"stage": name, "error": f"{type(e).__name__}: {e}",
                                    "traceback": traceback.format_exc()}
            _merge_previous(lab, out, stages is not None)
            (out / "manifest.json").write_text(lab.manifest.to_json())
            raise PipelineError(f"stage {name!r} failed: {type(e).__name__}: {e}", lab.manifest) from e
        lab.manifest.wall_times[name] = time.perf_counter() - t0
    _merge_previous(lab, out, stages is not None)
    lab.write("summary.json", json.dumps(lab.summary(), indent=2, sort_keys=True, default=_json_default) + "\n")
    (out / "manifest.json").write_text(lab.manifest.to_json())
    return lab.manifest
