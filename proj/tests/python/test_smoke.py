import os
import subprocess

import numpy as np
import pytest

import lsemvae

scipy_signal = pytest.importorskip("scipy.signal")
sk_metrics = pytest.importorskip("sklearn.metrics")


def test_bandpass_matches_scipy_design_and_filtfilt():
    fs = 500.0
    rng = np.random.default_rng(0)
    x = np.cumsum(rng.normal(size=2000)) + np.sin(np.arange(2000) / 7.0)

    ours = np.array(lsemvae.design_bandpass(fs))
    y = lsemvae.bandpass_filter(x, fs)
    # Same sections through scipy's zero-phase filter (odd padding of 27 samples).
    np.testing.assert_allclose(y, scipy_signal.sosfiltfilt(ours, x), rtol=0, atol=1e-9)

    ref = np.vstack([
        scipy_signal.butter(4, 0.5, "highpass", fs=fs, output="sos"),
        scipy_signal.butter(4, 40.0, "lowpass", fs=fs, output="sos"),
    ])
    w = np.linspace(0.1, 200.0, 400)
    _, h_ours = scipy_signal.sosfreqz(ours, worN=w, fs=fs)
    _, h_ref = scipy_signal.sosfreqz(ref, worN=w, fs=fs)
    np.testing.assert_allclose(np.abs(h_ours), np.abs(h_ref), atol=1e-8)


def test_zscore_and_interpolation():
    z = lsemvae.zscore(np.array([1.0, 2.0, 3.0, 4.0]))
    assert abs(z.mean()) < 1e-12
    assert abs(z.std() - 1.0) < 1e-12
    filled = lsemvae.interpolate_missing(np.array([0.0, np.nan, 2.0, np.nan]))
    np.testing.assert_allclose(filled, [0.0, 1.0, 2.0, 2.0])


def test_auroc_and_mcc_match_sklearn():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(4, 60))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = np.round(rng.normal(size=n), 1)  # rounding forces ties
        assert lsemvae.auroc(scores, labels.tolist()) == pytest.approx(sk_metrics.roc_auc_score(labels, scores), abs=1e-12)
        pred = (scores > 0).astype(int)
        assert lsemvae.mcc(pred.tolist(), labels.tolist()) == pytest.approx(
            sk_metrics.matthews_corrcoef(labels, pred), abs=1e-12)


def test_single_class_auroc_raises():
    with pytest.raises(lsemvae.Error, match="UndefinedMetric"):
        lsemvae.auroc([0.1, 0.5], [1, 1])


def test_fusion_matches_numpy():
    rng = np.random.default_rng(2)
    mus = rng.uniform(-2, 2, size=(5, 3))
    vars_ = rng.uniform(0.05, 2.05, size=(5, 3))
    mu, var = lsemvae.poe_fuse(mus, vars_)
    prec = (1.0 / vars_).sum(axis=0)
    np.testing.assert_allclose(var, 1.0 / prec, rtol=1e-12)
    np.testing.assert_allclose(mu, (mus / vars_).sum(axis=0) / prec, rtol=1e-12)

    logits = rng.normal(size=5)
    w = lsemvae.gate_weights(logits)
    np.testing.assert_allclose(w, np.exp(logits) / np.exp(logits).sum(), rtol=1e-12)
    mu, var = lsemvae.moe_fuse(mus, vars_, w)
    m = (w[:, None] * mus).sum(axis=0)
    np.testing.assert_allclose(mu, m, rtol=1e-12)
    np.testing.assert_allclose(var, (w[:, None] * (vars_ + mus**2)).sum(axis=0) - m**2, rtol=1e-10)


def test_kl_closed_form():
    mu = np.array([0.5, -1.0])
    var = np.array([0.25, 2.0])
    expected = 0.5 * np.sum(var + mu**2 - 1.0 - np.log(var))
    assert lsemvae.kl_standard_normal(mu, var) == pytest.approx(expected, rel=1e-12)


def test_pawp():
    lav, lvm = 80.0, 120.0
    pawp, elevated = lsemvae.pawp_from_cmr(lav, lvm)
    assert pawp == pytest.approx(6.1352 + 0.07204 * lav + 0.02256 * lvm, abs=1e-12)
    assert elevated == (pawp > 15.0)


def test_synth_record_and_delineation():
    record, truth = lsemvae.synthesize_record(leads=["I", "II"], duration_s=4.0, seed=3)
    assert record.samples.shape == (2, 2000)
    assert [lead for lead, _ in truth] == ["I", "II"]
    peaks = lsemvae.detect_r_peaks(record.lead("II").astype(float), record.sample_rate_hz)
    assert len(peaks) == len(truth[1][1])
    found = lsemvae.delineate(record)
    assert len(found[1][1]) == len(peaks)


def test_record_codec_roundtrip(tmp_path):
    samples = np.arange(24, dtype=np.float32).reshape(2, 12)
    samples[0, 3] = np.nan
    rec = lsemvae.EcgRecord("r1", 250.0, ["I", "II"], samples, label=1, group="F")
    path = tmp_path / "r1.ecgr"
    lsemvae.write_record(rec, path)
    back = lsemvae.read_record(path)
    assert back.record_id == "r1" and back.label == 1 and back.group_tag == "F"
    np.testing.assert_array_equal(back.samples, samples)
    assert lsemvae.encode_record(back) == lsemvae.encode_record(rec)


def test_cli_pipeline_and_integrated_gradients(tmp_path):
    data = str(tmp_path / "data")
    root = str(tmp_path / "runs")
    code, _, err = lsemvae.run_cli(["synth", "--out", data, "--n", "12", "--leads", "3", "--length", "64", "--seed", "4"])
    assert code == 0, err
    code, _, err = lsemvae.run_cli(["pretrain", "--data", data, "--epochs", "2", "--batch-size", "4",
                                    "--latent-dim", "4", "--run-root", root])
    assert code == 0, err
    ckpt = os.path.join(root, "pretrain", "checkpoints", "pretrain.v1.ckpt")
    code, _, err = lsemvae.run_cli(["finetune", "--data", data, "--pretrained", ckpt, "--leads", "I,II,III",
                                    "--epochs", "2", "--batch-size", "4", "--fc-size", "8", "--folds", "3",
                                    "--run-root", root])
    assert code == 0, err

    model = lsemvae.FinetuneModel.load(os.path.join(root, "finetune", "checkpoints", "fold0.v1.ckpt"))
    assert model.leads == ["I", "II", "III"]
    record = lsemvae.preprocess_record(lsemvae.read_corpus(data)[0])
    ig = lsemvae.integrated_gradients(model, record, target=1, steps=16)
    assert len(ig["alpha"]) == 3 and all(a.shape == (64,) for a in ig["alpha"])
    for a in ig["alpha"]:
        assert 0.0 <= lsemvae.igar_lead(a) <= 100.0

    code, _, err = lsemvae.run_cli(["pretrain", "--data", data, "--epochs", "zero"])
    assert code == 2 and "pretrain.epochs" in err


def test_cli_binary_reports_help():
    exe = os.environ.get("LSEMVAE_CLI")
    if not exe:
        pytest.skip("LSEMVAE_CLI not set")
    out = subprocess.run([exe, "pretrain", "--help"], capture_output=True, text=True, check=True).stdout
    assert "--batch-size" in out and "128" in out
