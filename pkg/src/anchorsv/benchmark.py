"""Reference desk benchmark: stage-1 baseline vs stage-wise vs joint learning.

One call trains all three systems on a fresh synthetic corpus and evaluates
them on a disjoint set of test speakers.
"""

import time
from dataclasses import dataclass, replace

from .datagen import make_trials, split_by_speaker, synth_corpus
from .evaluation import full_eval
from .trainer import TrainConfig, train_joint, train_stage1, train_stage2


@dataclass(frozen=True)
class DeskCorpus:
    n_train_speakers: int = 32
    n_test_speakers: int = 16
    utts_per_speaker: int = 20
    frames: int = 50
    dim: int = 16
    intra_spread: float = 0.3
    channel_spread: float = 0.5
    style_spread: float = 0.5
    n_target: int = 2000
    n_nontarget: int = 2000

    def build(self, seed):
        full = synth_corpus(seed, self.n_train_speakers + self.n_test_speakers,
                            self.utts_per_speaker, self.frames, self.dim,
                            self.intra_spread, self.channel_spread,
                            style_spread=self.style_spread)
        train, test = split_by_speaker(full, self.n_test_speakers)
        trials = make_trials(test, seed, self.n_target, self.n_nontarget)
        return train, test, trials


@dataclass
class BenchmarkResult:
    seed: int
    reports: dict   # system name -> EvalReport
    logs: dict      # system name -> TrainLog
    seconds: float


def run_benchmark(seed, corpus=DeskCorpus(), config=TrainConfig(), systems=("stage1", "stage2", "joint")):
    start = time.perf_counter()
    train, test, trials = corpus.build(seed)
    base_cfg = replace(config, seed=seed)
    reports, logs = {}, {}
    base, logs["stage1"] = train_stage1(replace(base_cfg, stage="1"), train)
    if "stage1" in systems:
        reports["stage1"] = full_eval(base.extractor, test, trials, seed=seed)
    if "stage2" in systems:
        tuned, logs["stage2"] = train_stage2(replace(base_cfg, stage="2"), train, base)
        reports["stage2"] = full_eval(tuned.extractor, test, trials, seed=seed)
    if "joint" in systems:
        joint, logs["joint"] = train_joint(replace(base_cfg, stage="joint"), train)
        reports["joint"] = full_eval(joint.extractor, test, trials, seed=seed)
    return BenchmarkResult(seed, reports, logs, time.perf_counter() - start)
