import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from featnorm.datagen import scenario_from_text
from featnorm.network import checkpoint_from_text
from featnorm.service.app import create_app


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


TINY_GEN = {"num_classes": 3, "input_dim": 2, "samples_per_class": 15, "seed": 5, "domains": [
    {"rotation_angle": a, "scale": 1.0, "translation": [0.0, 0.0], "noise_sigma": 0.25,
     "present_classes": [0, 1, 2]}
    for a in (-0.3, 0.0, 0.3, 0.7)
]}
TINY_SETTINGS = {"epochs": 2, "batch_size": 9, "feature_dim": 6, "hidden_dims": []}


def tiny_experiment(extra=None):
    payload = {
        "scenario": {"generation": TINY_GEN},
        "target_domain": 3,
        "regimes": ["source_only", "fnn"],
        "seeds": [1, 2],
        "settings": TINY_SETTINGS,
        "experiment_id": "svc",
    }
    payload.update(extra or {})
    return payload


class TestHealth:
    def test_health(self, client):
        response = client.get("/health")
        assert response.status_code == 200
        assert response.json()["status"] == "ok"


class TestGenerate:
    def test_default_layout(self, client):
        response = client.post("/scenario/generate", json={"samples_per_class": 10})
        assert response.status_code == 200
        body = response.json()
        assert body["num_domains"] == 4
        scenario = scenario_from_text(body["scenario_text"])
        assert scenario.n_samples == body["num_samples"] == 4 * 5 * 10

    def test_explicit_domains(self, client):
        response = client.post("/scenario/generate", json=TINY_GEN)
        assert response.status_code == 200
        scenario = scenario_from_text(response.json()["scenario_text"])
        assert scenario.num_domains == 4
        assert scenario.num_classes == 3

    def test_bad_config_is_400(self, client):
        bad = dict(TINY_GEN, num_classes=1)
        response = client.post("/scenario/generate", json=bad)
        assert response.status_code == 400
        assert "classes" in response.json()["detail"]

    def test_validation_error_is_422(self, client):
        response = client.post("/scenario/generate", json={"num_classes": "many"})
        assert response.status_code == 422


class TestTrain:
    def test_train_round_trip(self, client):
        payload = {
            "scenario": {"generation": TINY_GEN},
            "regime": "fnn",
            "seed": 1,
            "target_domain": 3,
            "settings": TINY_SETTINGS,
        }
        response = client.post("/train", json=payload)
        assert response.status_code == 200
        body = response.json()
        spec, params = checkpoint_from_text(body["checkpoint_text"])
        assert spec.feature_dim == 6
        assert body["peer_checkpoint_text"] is None
        assert body["steps"] == len(body["log_text"].strip().split("\n"))
        assert 0.0 <= body["target_accuracy"] <= 1.0

    def test_cfnn_returns_peer(self, client):
        payload = {
            "scenario": {"generation": TINY_GEN},
            "regime": "cfnn",
            "seed": 1,
            "target_domain": 3,
            "settings": TINY_SETTINGS,
        }
        body = client.post("/train", json=payload).json()
        assert body["peer_checkpoint_text"] is not None
        checkpoint_from_text(body["peer_checkpoint_text"])

    def test_target_in_sources_rejected(self, client):
        payload = {
            "scenario": {"generation": TINY_GEN},
            "regime": "fnn",
            "target_domain": 3,
            "sources": [1, 2, 3],
            "settings": TINY_SETTINGS,
        }
        assert client.post("/train", json=payload).status_code == 400

    def test_scenario_source_requires_exactly_one(self, client):
        payload = {"scenario": {}, "regime": "fnn", "settings": TINY_SETTINGS}
        assert client.post("/train", json=payload).status_code == 422


class TestExperiments:
    def test_dg_deterministic(self, client):
        first = client.post("/experiment/dg", json=tiny_experiment()).json()
        second = client.post("/experiment/dg", json=tiny_experiment()).json()
        assert first["csv_text"] == second["csv_text"]
        assert first["json_text"] == second["json_text"]
        rows = first["csv_text"].strip().split("\n")
        assert len(rows) == 1 + 2 * 2  # header + regimes x seeds

    def test_category_shift(self, client):
        payload = tiny_experiment({"removed_classes": {"0": [0], "1": [1]}})
        body = client.post("/experiment/category-shift", json=payload).json()
        doc = json.loads(body["json_text"])
        gains = [
            r["transfer_gain"]
            for r in doc["runs"]
            if r["regime"] == "source_only" and r["category_shift"]
        ]
        assert gains and all(g == 0.0 for g in gains)

    def test_category_shift_target_removal_rejected(self, client):
        payload = tiny_experiment({"removed_classes": {"3": [0]}})
        assert client.post("/experiment/category-shift", json=payload).status_code == 400

    def test_sweep(self, client):
        payload = tiny_experiment({"regimes": ["fnn"], "delta_r_values": [0.5, 1.0]})
        body = client.post("/experiment/sweep", json=payload).json()
        doc = json.loads(body["json_text"])
        assert sorted({r["delta_r"] for r in doc["runs"]}) == [0.5, 1.0]

    def test_sweep_single_value_rejected(self, client):
        payload = tiny_experiment({"regimes": ["fnn"], "delta_r_values": [1.0]})
        assert client.post("/experiment/sweep", json=payload).status_code == 400


class TestEmbeddings:
    def test_dump_matches_scenario_size(self, client):
        gen = client.post("/scenario/generate", json=TINY_GEN).json()
        train = client.post(
            "/train",
            json={
                "scenario": {"scenario_text": gen["scenario_text"]},
                "regime": "source_only",
                "target_domain": 3,
                "settings": TINY_SETTINGS,
            },
        ).json()
        body = client.post(
            "/embeddings",
            json={
                "scenario": {"scenario_text": gen["scenario_text"]},
                "checkpoint_text": train["checkpoint_text"],
            },
        ).json()
        assert body["num_lines"] == gen["num_samples"]
        features = np.array(
            [[float(v) for v in line.split()[3:]] for line in body["dump_text"].strip().split("\n")]
        )
        assert features.shape == (gen["num_samples"], 6)
