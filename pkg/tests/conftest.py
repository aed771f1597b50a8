"""Shared fixtures: the desk-scale corpus, a pretrained backbone, and the
adaptation protocol runs reused across the acceptance criteria."""

import numpy as np
import pytest

from sceneadapt import model, scenes, training
from sceneadapt.runtime import tune_allocator

tune_allocator()

CORPUS_SEED = 11
PRETRAIN_SEED = 7
ADAPT_SEEDS = (1, 2, 3)
DESK_BANDS = 32
DESK_HIDDEN = 32


class DeskSetup:
    """Lazily built desk-scale world shared by a test session."""

    def __init__(self):
        self.pipeline = model.Pipeline(DESK_BANDS)
        self.specs = scenes.make_desk_specs(seed=CORPUS_SEED)
        self._scene_cache = {}
        self._pretrained = None
        self._pretrain_log = None

    def scene(self, spec):
        if spec.index not in self._scene_cache:
            self._scene_cache[spec.index] = scenes.build_scene(spec)
        return self._scene_cache[spec.index]

    def _ensure_pretrained(self):
        if self._pretrained is None:
            corpus_cfg = scenes.PretrainCorpusConfig(
                speakers=tuple(range(8)), utterances_per_speaker=10,
                noise_scenarios=("white", "pink"), noise_clips_per_scenario=16,
                seed=CORPUS_SEED)
            speech, noise = scenes.build_pretrain_corpus(corpus_cfg)
            params = model.init_params(DESK_BANDS, DESK_HIDDEN, seed=PRETRAIN_SEED)
            ckpt, log = training.pretrain(
                params, speech, noise,
                training.PretrainConfig(epochs=16, seed=PRETRAIN_SEED),
                self.pipeline)
            self._pretrained = ckpt
            self._pretrain_log = log

    @property
    def checkpoint(self):
        self._ensure_pretrained()
        return self._pretrained

    @property
    def pretrain_log(self):
        self._ensure_pretrained()
        return self._pretrain_log

    def pretrained_params(self):
        return model.load(self.checkpoint, trainable=False)


@pytest.fixture(scope="session")
def desk():
    return DeskSetup()


@pytest.fixture(scope="session")
def lora_runs(desk):
    """The 3-seed x 2-mode LoRA protocol grid over the 12 desk scenes."""
    base = desk.pretrained_params()
    runs = {}
    for mode in ("isolated", "sequential"):
        for seed in ADAPT_SEEDS:
            schedule = scenes.sequence_scenes(desk.specs, mode, seed=seed)
            cfg = training.AdaptConfig(method="lora", seed=seed)
            runs[(mode, seed)] = training.run_protocol(
                schedule, base, cfg, desk.pipeline, desk.scene)
    return runs


@pytest.fixture(scope="session")
def remixit_run(desk):
    """One full-fine-tune baseline pass (sequential, first adapt seed)."""
    base = desk.pretrained_params()
    schedule = scenes.sequence_scenes(desk.specs, "sequential", seed=ADAPT_SEEDS[0])
    cfg = training.AdaptConfig(method="remixit", seed=ADAPT_SEEDS[0])
    return training.run_protocol(schedule, base, cfg, desk.pipeline, desk.scene)


@pytest.fixture(scope="session")
def tiny_world():
    """A miniature corpus for fast protocol-shape tests: 2 scenes, short
    clips, throwaway random backbone."""
    pipeline = model.Pipeline(8)
    specs = [
        scenes.SceneSpec(0, "white", (0.0, 5.0), (20, 21), seed=5),
        scenes.SceneSpec(1, "hum", (5.0, 10.0), (22, 23, 24), seed=5),
    ]
    sizes = scenes.SceneSizes(n_adapt=4, n_adapt_noise=3, n_test=4,
                              adapt_clip_s=1.2, test_clip_s=1.0)
    cache = {}

    def provider(spec):
        if spec.index not in cache:
            cache[spec.index] = scenes.build_scene(spec, sizes)
        return cache[spec.index]

    params = model.init_params(8, 8, seed=3)
    params.set_trainable(False)
    return {"pipeline": pipeline, "specs": specs, "sizes": sizes,
            "provider": provider, "params": params}
