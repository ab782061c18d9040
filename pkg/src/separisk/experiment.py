"""The repeated-split experiment: every enabled model trained per run on shared splits."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .additive_model import MODEL_CONFIGS, AdditiveRiskModel, TrainConfig, fit_config
from .cohort import Cohort
from .eval_stats import ALPHA, ComparisonResult, RunReport, auc, compare_runs, metrics_report, render_table
from .interpret import model_weights
from .tabular_prep import Split, split_cohort
from .video_branch import VideoNet, VideoNetConfig, build_video_net, train_video

# configurations that also get a degree-1 unconstrained baseline
LR_BASES = ("cd", "edm", "cd+edm")


@dataclass
class ExperimentConfig:
    runs: int = 5
    seed: int = 0
    modalities: tuple[str, ...] = ("cd", "edm")
    train: TrainConfig = field(default_factory=TrainConfig)
    video_train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=50, batch_size=32))
    video_net: VideoNetConfig | None = None
    logistic_baseline: bool = False
    test_frac: float = 0.2
    val_frac: float = 0.1
    jobs: int = 1
    alpha: float = ALPHA

    def __post_init__(self):
        bad = set(self.modalities) - {"cd", "edm", "video"}
        if bad:
            raise ValueError(f"unknown modalities {sorted(bad)}")
        if self.runs < 1:
            raise ValueError("need at least one run")

    def model_names(self) -> list[str]:
        """Enabled additive configurations, in table order."""
        mods = set(self.modalities)
        return [n for n, m in MODEL_CONFIGS.items() if set(m) <= mods]

    @property
    def uses_video(self) -> bool:
        return "video" in self.modalities


@dataclass
class RunOutput:
    report: RunReport
    split: Split
    models: dict[str, AdditiveRiskModel]
    video_net: VideoNet | None = None


@dataclass
class ExperimentResult:
    runs: list[RunOutput]
    comparisons: list[ComparisonResult]

    @property
    def reports(self) -> list[RunReport]:
        return [r.report for r in self.runs]

    def table(self) -> str:
        return render_table(self.reports, self.comparisons)

    def metrics(self) -> str:
        return metrics_report(self.reports, self.comparisons)


def run_seeds(master: int, runs: int) -> list[tuple[int, int, int]]:
    """(split, tabular-init, video-init) seeds for each run, derived from ``master``."""
    children = np.random.SeedSequence(master).spawn(runs)
    return [tuple(int(s) for s in c.generate_state(3)) for c in children]


def _weights_snapshot(model: AdditiveRiskModel) -> dict[str, float]:
    snap = {f: w for f, (w, _, _) in model_weights(model).items()}
    snap["bias"] = model.bias
    return snap


def _run_one(run_id: int, cohort: Cohort, videos, config: ExperimentConfig) -> RunOutput:
    split_seed, tab_seed, vid_seed = run_seeds(config.seed, config.runs)[run_id]
    split = split_cohort(cohort.labels, split_seed, config.test_frac, config.val_frac)
    tr, va, te = cohort.subset(split.train), cohort.subset(split.validation), cohort.subset(split.test)
    report = RunReport(run_id)
    z = None
    net = None
    if config.uses_video:
        vcfg = config.video_net or VideoNetConfig(*videos.shape[1:])
        net = build_video_net(vcfg, seed=vid_seed % 2**31)
        net, hist = train_video(net, videos[split.train], tr.labels, videos[split.validation], va.labels,
                                replace(config.video_train, seed=vid_seed % 2**31))
        z = net.score(videos)["pre_activation"]
        report.aucs["video"] = auc(z[split.test], te.labels)
        report.loss_histories["video"] = hist.to_dict()
    models = {}
    tcfg = replace(config.train, seed=tab_seed % 2**31)
    jobs = [(n, tcfg) for n in config.model_names()]
    if config.logistic_baseline:
        lr_cfg = replace(tcfg, degree=1, constrained=False)
        jobs += [(f"{n}:lr", lr_cfg) for n in LR_BASES if n in config.model_names()]
    for name, cfg in jobs:
        base = name.split(":")[0]
        needs_video = "video" in MODEL_CONFIGS[base]
        model, hist = fit_config(base, tr, va, cfg,
                                 z[split.train] if needs_video else None,
                                 z[split.validation] if needs_video else None)
        model.name = name
        model.meta = {"run_id": run_id, "best_epoch": hist.best_epoch, "seed": cfg.seed}
        models[name] = model
        scores = model.logodds(te, z[split.test] if needs_video else None)
        report.aucs[name] = auc(scores, te.labels)
        report.loss_histories[name] = hist.to_dict()
        report.weights[name] = _weights_snapshot(model)
    return RunOutput(report, split, models, net)


def run_experiment(cohort: Cohort, videos=None, config: ExperimentConfig | None = None) -> ExperimentResult:
    """Train every enabled configuration on ``config.runs`` independent stratified splits.

    ``videos`` is an ``[n, T, H, W]`` array aligned with the cohort rows and is
    only touched when the video modality is enabled.  Each run draws its own
    split; within a run all models share it.
    """
    config = config or ExperimentConfig()
    if config.uses_video:
        if videos is None:
            raise ValueError("video modality enabled but no clips given")
        videos = np.asarray(videos, dtype=np.float64)
        if videos.ndim != 4 or videos.shape[0] != len(cohort):
            raise ValueError("need one [T, H, W] clip per cohort row")
    else:
        videos = None
    if config.jobs > 1 and config.runs > 1:
        with ProcessPoolExecutor(min(config.jobs, config.runs)) as ex:
            outs = list(ex.map(_run_one, range(config.runs), [cohort] * config.runs,
                               [videos] * config.runs, [config] * config.runs))
    else:
        outs = [_run_one(r, cohort, videos, config) for r in range(config.runs)]
    comparisons = compare_runs([o.report for o in outs], alpha=config.alpha)
    return ExperimentResult(outs, comparisons)
