"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``[criterion N] PASS|FAIL`` line with the measured values.
"""

import time

import numpy as np

from hvitkit import hvit, vit
from hvitkit.cli import main as cli_main
from hvitkit.config import model_config_text
from hvitkit.data import synthetic_dataset
from hvitkit.evaluation import TrainConfig, evaluate, permutation_test, qwk, stratified_kfold, train
from hvitkit.factorization import DegenerateBlendError, LevelPixelField, factorize
from hvitkit.hvit import GLOBAL, LOCAL, FULL, TEST, build_model
from hvitkit.numerics import Graph, Tensor, checkpoint, grad_check, mse_loss
from hvitkit.pnm import read_ppm, write_ppm
from hvitkit.preprocessing import SlideRaster, TissueMask, extract_regions, segment_tissue, synth_slide

LEVEL_NAMES = ("patch", "region", "slide")


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")


# --- 1. gradient fidelity --------------------------------------------------


def random_tiny_config(rng):
    heads = int(rng.choice([1, 2, 4]))
    dim = heads * int(rng.integers(max(1, 4 // heads), 16 // heads + 1))
    n_tokens = int(rng.integers(1, 10))
    grids = [(r, n_tokens // r) for r in range(1, 4) if n_tokens % r == 0 and n_tokens // r <= 3]
    grid = grids[0] if grids and rng.random() < 0.5 else None
    return vit.ViTConfig(int(rng.integers(1, 9)), dim, int(rng.integers(1, 3)), heads, float(rng.choice([1.0, 2.0])), grid), n_tokens


def test_criterion_1_gradient_fidelity(capsys):
    rng = np.random.default_rng(2024)
    start, worst = time.perf_counter(), 0.0
    for _ in range(20):
        cfg, n_tokens = random_tiny_config(rng)
        w = {k: (1.0 if k.endswith("_g") else 0.0) + rng.normal(0, 0.3, size=s) for k, s in vit.weight_shapes(cfg).items()}
        g = Graph()
        cls, _ = vit.forward(cfg, vit.bind(w, g, trainable=True), rng.normal(size=(n_tokens, cfg.input_token_dim)))
        worst = max(worst, grad_check(g, mse_loss(cls, Tensor(rng.normal(size=cfg.embed_dim))), h=1e-5))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and elapsed < 60
    report(capsys, 1, ok, f"max relative error {worst:.2e} over 20 configs in {elapsed:.1f}s")
    assert ok


# --- 2. factorization oracle -----------------------------------------------


def direct_pixel_blend(values, frozen, gamma, y, x):
    n = sum(frozen)
    beta = n * (1 - gamma) + (len(frozen) - n) * gamma
    total = 0.0
    for v, fz in zip(values, frozen):
        finetuned = 0.0 if fz else 1.0
        total += v[y, x] * (gamma * finetuned + (1 - gamma) * (1 - finetuned))
    return total / beta


def test_criterion_2_factorization_oracle(capsys):
    rng = np.random.default_rng(7)
    worst, degenerate_ok = 0.0, True
    for _ in range(1000):
        values = [rng.uniform(size=(4, 4)) for _ in range(3)]
        frozen = tuple(bool(b) for b in rng.integers(0, 2, 3))
        gamma = float(rng.uniform())
        fields = [LevelPixelField(v, l, f) for v, l, f in zip(values, LEVEL_NAMES, frozen)]
        got = factorize(fields, gamma)
        ref = np.array([[direct_pixel_blend(values, frozen, gamma, y, x) for x in range(4)] for y in range(4)])
        worst = max(worst, float(np.abs(got - ref).max()))
    identity_ok = True
    for frozen in [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]:
        c = float(rng.uniform())
        fields = [LevelPixelField(np.full((4, 4), c), l, bool(f)) for l, f in zip(LEVEL_NAMES, frozen)]
        identity_ok &= bool(np.all(factorize(fields, 0.5) == c))
    for frozen, gamma in (((1, 1, 1), 1.0), ((0, 0, 0), 0.0)):
        fields = [LevelPixelField(np.ones((4, 4)), l, bool(f)) for l, f in zip(LEVEL_NAMES, frozen)]
        try:
            factorize(fields, gamma)
            degenerate_ok = False
        except DegenerateBlendError:
            pass
    ok = worst <= 1e-12 and identity_ok and degenerate_ok
    report(capsys, 2, ok, f"max |diff| {worst:.1e} over 1000 trials; gamma=0.5 identity {identity_ok}; beta=0 errors {degenerate_ok}")
    assert ok


# --- 3. QWK oracle --------------------------------------------------------


def brute_qwk(y, p, c=6):
    n = len(y)
    O = [[0.0] * c for _ in range(c)]
    for a, b in zip(y, p):
        O[a][b] += 1
    hist_y = [sum(row) for row in O]
    hist_p = [sum(O[i][j] for i in range(c)) for j in range(c)]
    num = den = 0.0
    for i in range(c):
        for j in range(c):
            w = (i - j) ** 2 / (c - 1) ** 2
            num += w * O[i][j]
            den += w * hist_y[i] * hist_p[j] / n
    return 1.0 if den == 0 else 1 - num / den


def test_criterion_3_qwk_oracle(capsys):
    rng = np.random.default_rng(11)
    worst, self_ok = 0.0, True
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        y, p = rng.integers(0, 6, n), rng.integers(0, 6, n)
        worst = max(worst, abs(qwk(y, p) - brute_qwk(list(y), list(p))))
        self_ok &= qwk(y, y) == 1.0
    ok = worst <= 1e-12 and self_ok
    report(capsys, 3, ok, f"max |diff| {worst:.1e} over 1000 instances; qwk(y,y)=1 {self_ok}")
    assert ok


# --- 4. freeze contract -----------------------------------------------------


def test_criterion_4_freeze_contract(capsys):
    ds = synthetic_dataset(30, 4, TEST, balanced=True)
    split = stratified_kfold(ds.labels, 5, 4)
    details, ok = [], True
    for scheme in (GLOBAL, LOCAL):
        model = build_model(TEST, scheme=scheme, seed=4, init_std=0.2)
        frozen = [s for s in hvit.STAGES if scheme.is_frozen(s)]
        before = {s: checkpoint.dumps(model.stage_state(s)) for s in hvit.STAGES}
        trained, _ = train(model, ds, split, 0, TrainConfig(epochs=5, lr=1e-3, optimizer="adam", batch_size=8, seed=4))
        after = {s: checkpoint.dumps(trained.stage_state(s)) for s in hvit.STAGES}
        same = all(before[s] == after[s] for s in frozen)
        moved = all(before[s] != after[s] for s in hvit.STAGES if s not in frozen)
        ok &= same and moved
        details.append(f"{scheme.name}: frozen {'+'.join(frozen)} identical={same}, trainable changed={moved}")
    report(capsys, 4, ok, "; ".join(details))
    assert ok


# --- 5. permutation invariance --------------------------------------------


def test_criterion_5_region_permutation_invariance(capsys):
    rng = np.random.default_rng(5)
    model = build_model(TEST, seed=5, init_std=0.2)
    slide, _ = synth_slide(5, 3, TEST, regions_per_side=3)
    regions = extract_regions(slide, segment_tissue(slide), TEST, min_tissue=0.0).pixels()
    base, _ = hvit.forward_slide(model, list(regions))
    drift = 0.0
    for _ in range(100):
        perm = rng.permutation(len(regions))
        drift = max(drift, abs(hvit.forward_slide(model, list(regions[perm]))[0] - base))
    ok = drift <= 1e-9
    report(capsys, 5, ok, f"max score drift {drift:.1e} over 100 reorderings of {len(regions)} regions")
    assert ok


# --- 6. preprocessing exactness --------------------------------------------


def test_criterion_6_preprocessing_exactness(capsys):
    full = SlideRaster(np.broadcast_to(np.array([200, 40, 200], np.uint8), (4096, 4096, 3)).copy())
    n_full = len(extract_regions(full, segment_tissue(full), FULL))
    s = FULL.region_size
    blank = SlideRaster(np.full((s, s, 3), 255, np.uint8))
    kept = {}
    for frac in (0.099, 0.101):
        count = round(frac * s * s)
        m = np.zeros(s * s, bool)
        m[:count] = True
        kept[frac] = len(extract_regions(blank, TissueMask(m.reshape(s, s)), FULL, min_tissue=0.10))
    ok = n_full == 4 and kept[0.099] == 0 and kept[0.101] == 1
    report(capsys, 6, ok, f"4096^2 full tissue -> {n_full} regions; 9.9% kept {kept[0.099]}, 10.1% kept {kept[0.101]}")
    assert ok


# --- 7. directional reproduction ---------------------------------------------


def cross_validated_qwk(ds, folds, scheme, seed):
    scores = []
    for f in range(folds.k):
        model = build_model(TEST, scheme=scheme, seed=seed, init_std=0.2)
        cfg = TrainConfig(epochs=20, lr=1e-3, optimizer="adam", batch_size=8, seed=seed)
        trained, _ = train(model, ds, folds, f, cfg)
        scores.append(evaluate(trained, ds, folds.held_out(f))[0])
    return float(np.mean(scores))


def test_criterion_7_local_beats_global(capsys):
    start, passes, rows = time.perf_counter(), 0, []
    for seed in range(5):
        ds = synthetic_dataset(200, seed, TEST)
        folds = stratified_kfold(ds.labels, 5, seed)
        q_global = cross_validated_qwk(ds, folds, GLOBAL, seed)
        q_local = cross_validated_qwk(ds, folds, LOCAL, seed)
        good = q_local > q_global and q_local >= 0.6
        passes += good
        rows.append(f"seed {seed}: local {q_local:.3f} global {q_global:.3f} {'ok' if good else 'miss'}")
    elapsed = time.perf_counter() - start
    ok = passes >= 4
    report(capsys, 7, ok, f"{passes}/5 seeds ({'; '.join(rows)}) in {elapsed / 60:.1f} min")
    assert ok


# --- 8. permutation test sanity ---------------------------------------------


def test_criterion_8_permutation_test(capsys):
    rng = np.random.default_rng(8)
    y = rng.integers(0, 6, 60)
    a = rng.integers(0, 6, 60)
    p_same = permutation_test(y, a, a, iters=9999, seed=0)
    labels = np.arange(60) % 6
    derangement = (labels + 3) % 6
    p_max = permutation_test(labels, labels, derangement, iters=9999, seed=0)
    b = rng.integers(0, 6, 60)
    repeat = permutation_test(y, a, b, iters=999, seed=3) == permutation_test(y, a, b, iters=999, seed=3)
    ok = p_same == 1.0 and p_max < 0.05 and repeat
    report(capsys, 8, ok, f"identical p={p_same}; maximal-effect p={p_max:.4g}; deterministic {repeat}")
    assert ok


# --- 9. heatmap determinism -------------------------------------------------


def test_criterion_9_heatmap_determinism(tmp_path, capsys):
    model = build_model(TEST, seed=9, init_std=0.2)
    ckpt = tmp_path / "model.hvt"
    hvit.save_weights(model, ckpt)
    ckpt.with_suffix(".cfg").write_text(model_config_text(model, 0.2, 9))
    slide, _ = synth_slide(9, 4, TEST, regions_per_side=2)
    write_ppm(tmp_path / "slide.ppm", slide.pixels)
    outs = []
    for run in ("a", "b"):
        code = cli_main([
            "heatmap", "--checkpoint", str(ckpt), "--slide", str(tmp_path / "slide.ppm"),
            "--sweep", "0.3,0.5,0.7", "--level", "factorized", "--out-dir", str(tmp_path / run),
        ])
        assert code == 0
        outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / run).iterdir())})
    identical = outs[0] == outs[1]
    h, w = slide.height, slide.width
    sweep = read_ppm(tmp_path / "a" / "heatmap_sweep.ppm")
    panels = [read_ppm(tmp_path / "a" / f"heatmap_gamma_{g}.ppm") for g in ("0.3", "0.5", "0.7")]
    layout = sweep.shape[0] == h and all(
        np.array_equal(sweep[:, i * (w + 4) : i * (w + 4) + w], p) for i, p in enumerate(panels)
    )
    distinct = not np.array_equal(panels[0], panels[2])
    ok = identical and layout and distinct
    report(capsys, 9, ok, f"byte-identical {identical} across {len(outs[0])} files; 3-panel sweep layout {layout}; panels differ {distinct}")
    assert ok
