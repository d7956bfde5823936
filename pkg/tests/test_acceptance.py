"""Acceptance criteria, each at its stated tolerance, with one PASS/FAIL line apiece.

The desk-scale model (346 synthetic transients, 1000 optimizer steps, full
configuration) is trained once per session, which takes roughly 20 minutes
on one CPU core. Set ``PAE_ACCEPTANCE_CACHE`` to a directory to keep the
trained checkpoint between sessions; a cached checkpoint is only reused when
its recorded training config matches.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from pae import numerics as nx
from pae.cli import main
from pae.corruption import corrupt_each, mask_patches
from pae.datagen import generate_dataset
from pae.diagnosis import end_to_end_baseline, two_stage_report
from pae.manifold import (
    EmbeddingConfig,
    calibrate_affinities,
    conditional_affinities,
    knn_purity,
    squared_distances,
    student_t_affinities,
    tsne_embed,
)
from pae.model import (
    TOY_CONFIG,
    ModelConfig,
    decode,
    encode,
    encode_array,
    forward_loss,
    init_params,
    load_checkpoint,
    param_shapes,
    params_checksum,
    reconstruction_metrics,
    save_checkpoint,
)
from pae.numerics import Tensor
from pae.training import DEFAULT_SCHEDULE, OptimizerState, TrainConfig, nadam_step, train

DATASET_COUNT, DATASET_SEED = 346, 7
TRAIN_STEPS, TRAIN_SEED = 1000, 0
CORRUPTION_SEED = 0
PENCIL_THETA = (0.99894354822692687063, 0.99815986387405406461)


# ---------------------------------------------------------------------------
# shared desk-scale run


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(DATASET_COUNT, DATASET_SEED)


def _train_config() -> TrainConfig:
    return TrainConfig(max_steps=TRAIN_STEPS, seed=TRAIN_SEED)


@pytest.fixture(scope="module")
def desk_model(dataset, tmp_path_factory):
    cfg = _train_config()
    key = json.dumps({"config": cfg.to_dict(), "data": [DATASET_COUNT, DATASET_SEED]}, sort_keys=True)
    cache = os.environ.get("PAE_ACCEPTANCE_CACHE")
    out = Path(cache) if cache else tmp_path_factory.mktemp("desk")
    stamp = out / "desk_key.json"
    if (out / "final.pae").exists() and stamp.exists() and stamp.read_text() == key:
        params, model_cfg = load_checkpoint(out / "final.pae")
        return params, model_cfg
    x_train = dataset.normalized(dataset.indices("train"))
    t0 = time.time()
    result = train(cfg, x_train, out_dir=out)
    print(f"desk training: {result.state.t} steps in {time.time() - t0:.0f} s")
    stamp.write_text(key)
    return result.params, cfg.model


@pytest.fixture(scope="module")
def corrupted_35_01(dataset):
    x = dataset.normalized()
    xc, masks = corrupt_each(x, 35.0, 0.1, ModelConfig().patch_len, CORRUPTION_SEED)
    return x, xc, masks


# ---------------------------------------------------------------------------
# 1-4: contracts


def test_criterion_01_shape_contract(verdict):
    cfg = ModelConfig()
    params = init_params(cfg, 0)
    rng = np.random.default_rng(1)
    t0 = time.time()
    ok = True
    for _ in range(20):
        x = rng.standard_normal((38, 200)) * rng.uniform(0.1, 10)
        z, cls = encode(x, None, params, cfg)
        out = decode(z, cls, params, cfg)
        ok &= z.shape == (1, 128) and out.shape == (1, 38, 200) and bool(np.all(np.isfinite(out.data)))
    elapsed = time.time() - t0
    verdict(1, "encode 38x200 -> 128, decode -> 38x200 on 20 inputs", ok and elapsed < 60, f"{elapsed:.1f} s")


def _op_kind_reports():
    rng = np.random.default_rng(2)

    def leaf(shape, name):
        return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)

    a, b = leaf((3, 4), "a"), leaf((3, 4), "b")
    w = leaf((4, 5), "w")
    g, beta = leaf((4,), "gamma"), leaf((4,), "beta")
    weights = rng.standard_normal((3, 4))
    cases = {
        "matmul": (lambda: nx.sum(nx.square(nx.matmul(a, w))), [a, w]),
        "add": (lambda: nx.sum(nx.square(nx.elementwise("add", a, b))), [a, b]),
        "mul": (lambda: nx.sum(nx.elementwise("mul", a, b)), [a, b]),
        "gelu": (lambda: nx.sum(nx.mul(nx.elementwise("gelu", a), weights)), [a]),
        "tanh": (lambda: nx.sum(nx.mul(nx.elementwise("tanh", a), weights)), [a]),
        "sigmoid": (lambda: nx.sum(nx.mul(nx.elementwise("sigmoid", a), weights)), [a]),
        "softmax": (lambda: nx.sum(nx.mul(nx.softmax_rows(a), weights)), [a]),
        "layer_norm": (lambda: nx.sum(nx.mul(nx.layer_norm(a, g, beta), weights)), [a, g, beta]),
    }
    return {k: nx.grad_check(f, p, h=1e-5, tol=1e-4) for k, (f, p) in cases.items()}


def test_criterion_02_gradient_correctness(verdict):
    t0 = time.time()
    reports = _op_kind_reports()
    cfg = TOY_CONFIG
    params = init_params(cfg, 21)
    rng = np.random.default_rng(22)
    for t in params.values():
        t.data[...] = rng.standard_normal(t.shape) * 0.3
    x_clean = rng.standard_normal((2, cfg.channels, cfg.samples))
    x_corr = x_clean + 0.1 * rng.standard_normal(x_clean.shape)
    mask = np.array([[False, True, False, False], [False, False, False, True]])

    def loss():
        return forward_loss(x_clean, x_corr, mask, params, cfg, True, np.random.default_rng(5))[1]

    model_report = nx.grad_check(loss, params, h=1e-5, tol=1e-4)
    elapsed = time.time() - t0
    covered = set(model_report.max_rel_error) == {n for n, _ in param_shapes(cfg)}
    worst_op = max(r.worst for r in reports.values())
    ok = all(r.passed for r in reports.values()) and model_report.passed and covered and elapsed < 600
    verdict(2, "grad_check on every op kind and the full toy PAE, rel. err < 1e-4", ok,
            f"worst op {worst_op:.1e}, worst model param {model_report.worst:.1e}, {elapsed:.0f} s")


def test_criterion_03_nadam_pencil_trace(verdict):
    params = {"theta": Tensor(np.array([1.0]), requires_grad=True, name="theta")}
    state = OptimizerState()
    errors = []
    for expected in PENCIL_THETA:
        params["theta"].grad = np.array([2.0])
        nadam_step(params, state)
        errors.append(abs(params["theta"].data[0] - expected))
    verdict(3, "nadam_step matches the two-step scalar trace to 1e-10", max(errors) < 1e-10,
            f"max error {max(errors):.1e}")


def test_criterion_04_curriculum(verdict):
    pairs = [(s.snr_db, s.mask_ratio) for s in DEFAULT_SCHEDULE]
    expected = [(20.0, 0.40), (30.0, 0.25), (40.0, 0.10), (35.0, 0.20), (35.0, 0.20)]
    _, mask = mask_patches(np.ones((190, 40)), 0.40, np.random.default_rng(0))
    verdict(4, "default schedule and 76 of 190 patches masked at 0.40",
            pairs == expected and int(mask.sum()) == 76, f"{int(mask.sum())} masked")


# ---------------------------------------------------------------------------
# 5-8: measured on the desk-scale run


@pytest.mark.slow
def test_criterion_05_inpainting(verdict, dataset, desk_model):
    params, cfg = desk_model
    x = dataset.normalized()
    te = dataset.indices("test")
    xc, masks = corrupt_each(x, 35.0, 0.2, cfg.patch_len, CORRUPTION_SEED)
    m = reconstruction_metrics(x[te], xc[te], masks[te], params, cfg)
    ratio = m["masked_mse"] / m["zero_fill_mse"]
    verdict(5, "masked-region MSE <= 0.5 x zero-fill MSE at SNR 35 / mask 0.2", ratio <= 0.5,
            f"masked {m['masked_mse']:.4f} vs zero-fill {m['zero_fill_mse']:.4f}, ratio {ratio:.3f}")


@pytest.mark.slow
def test_criterion_06_denoising(verdict, dataset, desk_model, corrupted_35_01):
    params, cfg = desk_model
    x, xc, masks = corrupted_35_01
    te = dataset.indices("test")
    m = reconstruction_metrics(x[te], xc[te], masks[te], params, cfg)
    verdict(6, "reconstruction MSE < corrupted-input MSE at SNR 35 / mask 0.1 (test split)",
            m["recon_mse"] < m["corrupted_mse"],
            f"recon {m['recon_mse']:.4f} vs corrupted {m['corrupted_mse']:.4f}")


@pytest.fixture(scope="module")
def latents(desk_model, corrupted_35_01):
    params, cfg = desk_model
    _, xc, masks = corrupted_35_01
    return encode_array(xc, masks, params, cfg)


@pytest.mark.slow
def test_criterion_07_two_stage_advantage(verdict, dataset, desk_model, corrupted_35_01, latents):
    params, _ = desk_model
    before = params_checksum(params)
    _, xc, _ = corrupted_35_01
    loc, size = dataset.locations(), dataset.sizes()
    tr, te = dataset.indices("train"), dataset.indices("test")
    corruption = {"snr_db": 35.0, "mask_ratio": 0.1}
    two = two_stage_report(latents[tr], loc[tr], size[tr], latents[te], loc[te], size[te], corruption, seed=0)
    e2e = end_to_end_baseline(xc[tr], loc[tr], size[tr], xc[te], loc[te], size[te], corruption, seed=0)
    frozen = params_checksum(params) == before
    ok = two.macro_f1 >= e2e.macro_f1 and two.rmse_cm <= e2e.rmse_cm and frozen
    verdict(7, "two-stage Macro-F1 >= end-to-end and RMSE <= end-to-end (SNR 35 / mask 0.1)", ok,
            f"two-stage F1 {two.macro_f1:.3f} RMSE {two.rmse_cm:.3f} cm; "
            f"end-to-end F1 {e2e.macro_f1:.3f} RMSE {e2e.rmse_cm:.3f} cm")


@pytest.mark.slow
def test_criterion_08_latent_clustering(verdict, dataset, corrupted_35_01, latents):
    _, xc, _ = corrupted_35_01
    loc = dataset.locations()
    cfg = EmbeddingConfig(seed=0)
    latent_purity = knn_purity(tsne_embed(latents, cfg).coords, loc, k=10)
    raw_purity = knn_purity(tsne_embed(xc.reshape(len(xc), -1), cfg).coords, loc, k=10)
    verdict(8, "10-NN location purity of latent t-SNE >= raw corrupted t-SNE + 0.05",
            latent_purity >= raw_purity + 0.05, f"latent {latent_purity:.3f} vs raw {raw_purity:.3f}")


# ---------------------------------------------------------------------------
# 9-10


def test_criterion_09_tsne_correctness(verdict):
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(3), 50)
    centres = np.zeros((3, 10))
    centres[np.arange(3), np.arange(3)] = 10.0
    x = centres[labels] + rng.standard_normal((150, 10))
    purity = knn_purity(tsne_embed(x, EmbeddingConfig(seed=0)).coords, labels, k=10)
    cond, _ = conditional_affinities(squared_distances(x), 30.0)
    entropy = [-np.sum(r[r > 0] * np.log2(r[r > 0])) for r in cond]
    entropy_err = float(np.max(np.abs(np.array(entropy) - np.log2(30.0))))
    p = calibrate_affinities(x, 30.0)
    q, _ = student_t_affinities(rng.standard_normal((150, 2)))
    p_err, q_err = abs(p.sum() - 1.0), abs(q.sum() - 1.0)
    ok = purity >= 0.9 and entropy_err <= 1e-5 and p_err <= 1e-9 and q_err <= 1e-6
    verdict(9, "3-Gaussian purity >= 0.9, entropy within 1e-5, P/Q normalised", ok,
            f"purity {purity:.3f}, entropy err {entropy_err:.1e}, |sum P - 1| {p_err:.1e}, |sum Q - 1| {q_err:.1e}")


def _artifacts(root: Path) -> dict:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and not p.name.startswith("run_")
    }


def _pipeline(root: Path) -> int:
    data, run = root / "data", root / "run"
    codes = [main(["--threads", "1", "gen-data", "--count", "24", "--seed", "7", "--out", str(data)])]
    cfg = {"dataset_dir": str(data), "out_dir": str(run), "max_steps": 12, "batch_size": 8,
           "checkpoint_every": 6, "seed": 3,
           "model": {"depth_enc": 1, "depth_dec": 1, "latent_dim": 16, "lstm_hidden": 16}}
    (root / "config.json").write_text(json.dumps(cfg))
    codes.append(main(["--threads", "1", "train", "--config", str(root / "config.json")]))
    lat = root / "enc" / "latents.csv"
    codes.append(main(["--threads", "1", "encode", "--checkpoint", str(run / "final.pae"), "--dataset", str(data),
                       "--snr", "35", "--mask", "0.1", "--seed", "4", "--out", str(lat)]))
    codes.append(main(["--threads", "1", "diagnose", "--latents", str(lat), "--raw", str(data), "--mode", "both",
                       "--corruption-seed", "4", "--iterations", "32", "--out", str(root / "diag")]))
    for source in ("clean", "corrupted", "latent"):
        extra = ["--latents", str(lat)] if source == "latent" else []
        codes.append(main(["--threads", "1", "tsne", "--input", source, "--dataset", str(data), *extra,
                           "--corruption-seed", "4", "--perplexity", "5", "--iterations", "250",
                           "--out", str(root / "tsne")]))
    return max(codes)


def test_criterion_10_reproducibility(verdict, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    codes = _pipeline(a), _pipeline(b)
    first, second = _artifacts(a), _artifacts(b)
    # paths inside the config differ between the two roots; compare everything else
    first.pop("config.json"), second.pop("config.json")
    identical = first == second and len(first) > 0
    params = init_params(ModelConfig(), 11)
    path = save_checkpoint(tmp_path / "rt.pae", params, ModelConfig())
    loaded, _ = load_checkpoint(path)
    roundtrip = all(params[k].data.tobytes() == loaded[k].data.tobytes() for k in params)
    roundtrip &= save_checkpoint(tmp_path / "rt2.pae", loaded, ModelConfig()).read_bytes() == path.read_bytes()
    verdict(10, "CLI pipeline byte-identical across two runs; checkpoint roundtrip bit-exact",
            codes == (0, 0) and identical and roundtrip, f"{len(first)} artifacts compared")
