from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from tools.sv_config import CorpusConfig, EpisodeConfig, TrainConfig
from tools.sv_corpus import generate_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus_config():
    return CorpusConfig(
        num_speakers=10,
        utterances_per_speaker=6,
        held_out_speakers=4,
        held_out_utterances=4,
        feature_dim=6,
        latent_dim=3,
        min_frames=12,
        max_frames=20,
        session_noise=0.3,
        frame_noise=0.5,
        seed=0,
    )


@pytest.fixture(scope="session")
def tiny_corpus(tiny_corpus_config):
    return generate_corpus(tiny_corpus_config)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        system="pn",
        steps_stage1=5,
        steps_stage2=4,
        lr_stage1=(1e-2, 1e-3),
        lr_stage2=(1e-3, 1e-4),
        frame_dims=(8,),
        embed_dim=4,
        fc2_dim=4,
        log_every=10,
        seed=0,
        episode=EpisodeConfig(n_speakers=4, k_support=1, k_query=2, crop_min=8, crop_max=12),
    )


def tiny_run_payload(output_dir: str) -> dict:
    """A complete run-config document small enough for CLI and experiment tests."""
    return {
        "seed": 0,
        "output_dir": output_dir,
        "corpus": {
            "num_speakers": 8,
            "utterances_per_speaker": 5,
            "held_out_speakers": 4,
            "held_out_utterances": 4,
            "feature_dim": 5,
            "latent_dim": 3,
            "min_frames": 10,
            "max_frames": 14,
            "session_noise": 0.3,
            "frame_noise": 0.5,
        },
        "episode": {
            "n_speakers": 3,
            "k_support": 1,
            "k_query": 2,
            "crop_min": 6,
            "crop_max": 10,
            "erase_fraction": 0.1,
            "erase_mode": "rectangle",
        },
        "train": {
            "steps_stage1": 3,
            "steps_stage2": 2,
            "lr_stage1": [0.01, 0.001],
            "lr_stage2": [0.001, 0.0001],
            "lam": 0.5,
            "metric": "sqeuclidean",
            "normalize_embeddings": True,
            "weight_decay": 0.0001,
            "adam_beta1": 0.9,
            "adam_beta2": 0.999,
            "adam_eps": 1e-08,
            "frame_dims": [6],
            "embed_dim": 4,
            "fc2_dim": 4,
            "log_every": 10,
        },
        "eval": {
            "targets_per_speaker": 2,
            "nontargets_per_speaker": 3,
            "p_target": 0.01,
            "c_miss": 1.0,
            "c_fa": 1.0,
            "center_embeddings": True,
            "center_utterances": 20,
            "conditions": ["dev", "eval"],
        },
        "experiment": {
            "systems": ["baseline", "pn", "mltc", "acl", "mltc-acl", "mlft", "acl-q", "fusion"],
            "seeds": [0, 1],
            "workers": 1,
            "trend_slack": 0.005,
        },
    }


@pytest.fixture
def run_payload(tmp_path):
    return tiny_run_payload(str(tmp_path / "out"))


@pytest.fixture
def config_file(tmp_path, run_payload) -> Path:
    path = tmp_path / "run.json"
    path.write_text(json.dumps(run_payload), encoding="utf-8")
    return path
