import json

import numpy as np
from pytest import raises

from attn_style import ConfigurationError, StyleIdConfig, stylize
from attn_style.evaluation import (
    GAMMA_SWEEP,
    TAU_SWEEP,
    ablation,
    gamma_sweep,
    read_manifest,
    round_trip_psnr,
    score,
    summarize,
    tau_sweep,
    write_report,
    write_rows,
)
from tests import TestCase


class TestScore(TestCase):
    def test_identical_images(self):
        image = self.random_image()
        cfsd_value, hist_loss = score(image, image, image)
        assert cfsd_value == 0.0
        assert hist_loss == 0.0

    def test_constants(self):
        assert GAMMA_SWEEP == (0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
        assert TAU_SWEEP[0] == 1.0


class TestSweeps(TestCase):
    def style_config(self, **options):
        return StyleIdConfig(dict(options, steps=self.steps))

    def test_gamma_sweep_matches_direct_runs(self):
        content, style = self.random_image(), self.random_image()
        rows = gamma_sweep(self.weights, content, style, self.style_config(), self.noise, gammas=(0.3, 1.0))
        assert [row["gamma"] for row in rows] == [0.3, 1.0]
        direct = stylize(content, style, self.weights, self.style_config(gamma=1.0), self.noise)
        assert rows[1]["cfsd"] == score(content, style, direct.image)[0]

    def test_tau_sweep(self):
        content, style = self.random_image(), self.random_image()
        rows = tau_sweep(self.weights, content, style, self.style_config(), self.noise, taus=(1.0, 2.0))
        assert [row["tau"] for row in rows] == [1.0, 2.0]
        assert all(row["cfsd"] >= 0.0 and 0.0 <= row["hist_loss"] <= 1.0 for row in rows)

    def test_ablation(self):
        pairs = [(self.random_image(), self.random_image())]
        rows = ablation(self.weights, pairs, ["A", "D"], self.noise, steps=self.steps)
        assert [row["preset"] for row in rows] == ["A", "D"]
        assert set(rows[0]) == {"preset", "cfsd", "hist_loss"}

    def test_ablation_unknown_preset(self):
        with raises(ConfigurationError):
            ablation(self.weights, [], ["Q"], self.noise, steps=self.steps)

    def test_round_trip_psnr(self):
        value = round_trip_psnr(self.weights, self.random_image(), self.steps, self.noise)
        assert np.isfinite(value)


class TestReports(object):
    def test_summarize(self):
        assert summarize([]) == {"count": 0, "cfsd_mean": None, "hist_loss_mean": None}
        summary = summarize([{"cfsd": 1.0, "hist_loss": 0.5}, {"cfsd": 3.0, "hist_loss": 0.25}])
        assert summary == {"count": 2, "cfsd_mean": 2.0, "hist_loss_mean": 0.375}

    def test_write_report(self, tmp_path):
        path = str(tmp_path / "report.jsonl")
        record = {
            "content": "c.png",
            "style": "s.png",
            "stylized": "x.png",
            "cfsd": 0.5,
            "hist_loss": 0.25,
            "gamma": None,
            "tau": 1.5,
            "extra": 1,
        }
        summary = write_report([record], path)
        with open(path) as handle:
            line = json.loads(handle.readline())
        assert "extra" not in line
        assert line["tau"] == 1.5
        with open(path + ".summary.json") as handle:
            assert json.load(handle) == summary

    def test_write_rows(self, tmp_path):
        path = str(tmp_path / "rows.csv")
        rows = [{"gamma": 0.5, "cfsd": 0.1, "hist_loss": 0.2, "ignored": 1}]
        write_rows(rows, path, ("gamma", "cfsd", "hist_loss"))
        with open(path) as handle:
            assert handle.read().splitlines() == ["gamma,cfsd,hist_loss", "0.5,0.1,0.2"]

    def test_read_manifest(self, tmp_path):
        manifest = tmp_path / "triplets.jsonl"
        manifest.write_text('{"content": "c.png", "style": "s.png", "stylized": "out/x.png", "tau": 2.0}\n')
        (triplet,) = read_manifest(str(manifest))
        assert triplet.stylized == str(tmp_path / "out" / "x.png")
        assert triplet.tau == 2.0
        assert triplet.gamma is None

    def test_read_manifest_rejects_bad_json(self, tmp_path):
        manifest = tmp_path / "triplets.jsonl"
        manifest.write_text("not json\n")
        with raises(ConfigurationError):
            read_manifest(str(manifest))
