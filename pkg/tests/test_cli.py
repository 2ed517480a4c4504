import json

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from prl.cli import main
from prl.ingest import read_tsv


def _run(*args):
    result = CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)
    return result


def _last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    r = _run("--out-dir", root / "cohort", "--seed", 2, "synth", "--patients", 50, "--tiles-per-slide", 40,
             "--clusters", 6, "--subtype-effects", "0:3.0", "--hazard-effects", "1:1.0", "--institutions", 6)
    assert r.exit_code == 0, r.output
    cfg = root / "cfg.ini"
    cfg.write_text("[cluster]\nk = 12\nk_assign = 12\nsample = 2000\n")
    return root, root / "cohort", cfg


def test_ingest(cohort):
    root, d, _ = cohort
    r = _run("--out-dir", root / "ing", "ingest", "--manifest", d / "manifest.tsv", "--labels", "LUAD,LUSC",
             "--tiles", d / "tiles.tsv", "--embeddings", d / "embeddings.prle", "--survival", d / "survival.tsv",
             "--cell-counts", d / "cell_counts.tsv", "--signatures", d / "signatures.tsv",
             "--growth-patterns", d / "growth_patterns.tsv")
    assert r.exit_code == 0, r.output
    rep = _last_json(r.output)
    assert rep["slides"] == 50 and rep["tiles"] == 50 * 40 and rep["embedding_dim"] == 16
    assert (root / "ing" / "embeddings.prle.sha256").exists()


def test_cluster_compose_characterize(cohort):
    root, d, cfg = cohort
    out = root / "cl"
    r = _run("--config", cfg, "--out-dir", out, "cluster", "--data-dir", d)
    assert r.exit_code == 0, r.output
    assert 1800 <= _last_json(r.output)["n_tiles"] <= 2000
    r = _run("--config", cfg, "--out-dir", out, "compose", "--data-dir", d, "--model", out / "cluster_model.prlm",
             "--level", "patient")
    assert r.exit_code == 0, r.output
    header, rows = read_tsv(out / "clr.tsv", ("owner_id",))
    vals = np.array([[float(r[h]) for h in header[1:]] for r in rows])
    assert np.allclose(vals.sum(1), 0.0, atol=1e-9)
    r = _run("--config", cfg, "--out-dir", out, "characterize", "--data-dir", d, "--model", out / "cluster_model.prlm")
    assert r.exit_code == 0, r.output
    header, _ = read_tsv(out / "characterization.tsv", ("cluster",))
    assert "ks_inflammatory" in header and "rho_immune_infiltration" in header


def test_classify_survival_report(cohort):
    root, d, cfg = cohort
    out = root / "runs"
    r = _run("--config", cfg, "--out-dir", out, "classify", "--data-dir", d)
    assert r.exit_code == 0, r.output
    h1 = _last_json(r.output)["summary_hash"]
    r = _run("--config", cfg, "--out-dir", out, "survival", "--data-dir", d, "--endpoint", "os")
    assert r.exit_code == 0, r.output
    assert 0 <= _last_json(r.output)["logrank_p"] <= 1
    r = _run("--out-dir", out, "report")
    assert r.exit_code == 0, r.output
    hashes = _last_json(r.output)
    assert hashes["classify"] == h1 and set(hashes) == {"classify", "survival_os"}


def test_errors_are_jsonl_with_exit_2(tmp_path):
    bad = tmp_path / "manifest.tsv"
    bad.write_text("slide_id\tpatient_id\nS1\tP1\n")
    r = CliRunner().invoke(main, ["--out-dir", str(tmp_path / "o"), "ingest", "--manifest", str(bad)])
    assert r.exit_code == 2
    rec = json.loads(r.output.strip().splitlines()[-1])
    assert rec["error"] == "parse_error" and "institution" in rec["message"]
    r = CliRunner().invoke(main, ["--out-dir", str(tmp_path / "o"), "report"])
    assert r.exit_code == 2
    assert json.loads(r.output.strip().splitlines()[-1])["error"] == "missing_artifact"
    r = CliRunner().invoke(main, ["--out-dir", str(tmp_path / "o"), "synth", "--hazard-effects", "40:1.0"])
    assert r.exit_code == 2
    assert json.loads(r.output.strip().splitlines()[-1])["error"] == "validation_error"


def test_bad_config_exit_2(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[nope]\nx = 1\n")
    r = CliRunner().invoke(main, ["--config", str(cfg), "--out-dir", str(tmp_path), "report"])
    assert r.exit_code == 2
    assert "unknown section" in r.output


def test_tile(tmp_path):
    rng = np.random.default_rng(0)
    img = np.full((500, 500, 3), 245, np.uint8)
    img[:300, :300] = rng.integers(80, 200, size=(300, 300, 3), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "slide.png")
    r = _run("--out-dir", tmp_path / "t", "tile", "--image", tmp_path / "slide.png", "--mpp", 2.016,
             "--slide-id", "S1")
    assert r.exit_code == 0, r.output
    assert _last_json(r.output)["tiles_kept"] == 1
    _, rows = read_tsv(tmp_path / "t" / "tiles.tsv", ("tile_id",))
    assert len(rows) == 1 and (tmp_path / "t" / "tiles").is_dir()


def test_ssl_verbs(tmp_path):
    r = _run("--out-dir", tmp_path, "ssl-check", "--instances", 3)
    assert r.exit_code == 0, r.output
    assert _last_json(r.output)["gradient_ok"]
    r = _run("--out-dir", tmp_path, "ssl-train-toy", "--epochs", 3)
    assert r.exit_code == 0, r.output
    assert (tmp_path / "loss_trace.csv").exists() and (tmp_path / "embeddings.prle").exists()
