"""Acceptance suite: one test per acceptance criterion.

Each criterion prints a PASS line with its measured numbers; the whole suite
is property-based plus synthetic-data quantitative (the published clinical
figures rely on access-restricted datasets and live in
``oaknet.reference`` as context constants only, never as assertions).

The desk-scale trainings (criteria 5 and 6) are the long poles: several
minutes each.  Networks are trained once per session and shared with the
determinism and end-to-end criteria.
"""

import time

import numpy as np
import pytest

from oaknet.cli import main as cli_main
from oaknet.cli import parse_predictions
from oaknet.data import (SyntheticConfig, save_dataset, synth_knees,
                         synth_radiographs)
from oaknet.gradsuite import run_suite
from oaknet.imageproc import (connected_components, hist_equalize,
                              otsu_threshold, template_distance_map)
from oaknet.locate import FcnTrainConfig, fcn_localize_roi, train_localizer
from oaknet.metrics import (classification_report, jaccard, roc_auc_ovr)
from oaknet.nn import build_network, get_preset, receptive_field, save_checkpoint
from oaknet.quantify import (TrainConfig, predict_batch, round_grade,
                             train_quantifier)

JOINT_EPOCHS = 8
FCN_EPOCHS = 6


def report(name, elapsed, budget, detail):
    print(f"\n[acceptance] {name}: PASS in {elapsed:.1f}s "
          f"(budget {budget:.0f}s) -- {detail}")


# ---------------------------------------------------------------------------
# shared trained models (sessions fixtures, built once)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def artifacts(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def trained_fcn(artifacts):
    """desk-fcn trained on 400 synthetic radiographs (ROI masks)."""
    train_ds = synth_radiographs(SyntheticConfig.radiographs(400, noise=0.0,
                                                             seed=11))
    t0 = time.time()
    network, history = train_localizer(
        train_ds, "desk-fcn",
        FcnTrainConfig(mask_mode="roi", epochs=FCN_EPOCHS, batch_size=8, seed=11))
    elapsed = time.time() - t0
    path = artifacts / "fcn.oakn"
    save_checkpoint(network, path, epoch=FCN_EPOCHS)
    return {"network": network, "path": path, "train_seconds": elapsed,
            "history": history}


@pytest.fixture(scope="session")
def trained_joint(artifacts):
    """desk-cnn (joint objective) trained on 500 synthetic knees."""
    knees = synth_knees(SyntheticConfig.knees(500, noise=0.0, seed=42))
    t0 = time.time()
    network, history = train_quantifier(
        knees, "desk-cnn",
        TrainConfig(mode="joint", epochs=JOINT_EPOCHS, batch_size=32, seed=7))
    elapsed = time.time() - t0
    path = artifacts / "cnn.oakn"
    save_checkpoint(network, path, epoch=JOINT_EPOCHS)
    return {"network": network, "path": path, "train_seconds": elapsed,
            "history": history}


@pytest.fixture(scope="session")
def held_out_knees():
    ds = synth_knees(SyntheticConfig.knees(100, noise=0.0, seed=4242))
    entries = ds.knee_entries()
    images = [ds.image(name) for name, _, _ in entries]
    labels = np.array([grade for _, _, grade in entries])
    return images, labels


# ---------------------------------------------------------------------------
# criterion 1: gradient suite
# ---------------------------------------------------------------------------

def test_gradient_suite():
    """Every differentiable op passes central finite differences:
    < 1e-6 at 64-bit and < 1e-4 at 32-bit, 20 seeds each, within 2 min."""
    t0 = time.time()
    rows = list(run_suite(seeds=20))
    elapsed = time.time() - t0
    failures = [(n, d, w) for n, d, w, _, ok in rows if not ok]
    assert not failures, f"gradient failures: {failures}"
    assert elapsed < 120.0
    worst64 = max(w for _, d, w, _, _ in rows if d == "float64")
    worst32 = max(w for _, d, w, _, _ in rows if d == "float32")
    report("gradient suite", elapsed, 120,
           f"{len(rows)} op/dtype rows; worst f64 {worst64:.2e}, "
           f"worst f32 {worst32:.2e}")


# ---------------------------------------------------------------------------
# criterion 2: shape conformance and parameter counts
# ---------------------------------------------------------------------------

# printed per-layer output shapes; entries replacing inconsistent printed
# cells are marked with the printed value they diverge from
CLSF_SHAPES = [
    ("conv1", (32, 100, 150)), ("pool1", (32, 49, 74)),
    ("conv2", (64, 49, 74)), ("pool2", (64, 24, 36)),
    ("conv3", (96, 24, 36)), ("pool3", (96, 11, 17)),
    ("conv4", (128, 11, 17)), ("pool4", (128, 5, 8)),
    ("fc5", (1024,)), ("fc6", (5,)),
]
REG_SHAPES = [
    ("conv1", (32, 100, 150)),   # printed 32x100x158: width typo
    ("pool1", (32, 49, 74)),
    ("conv2", (64, 49, 74)), ("pool2", (64, 24, 36)),
    ("conv3_1", (64, 24, 36)), ("conv3_2", (64, 24, 36)),
    ("pool3", (64, 11, 17)),
    ("conv4_1", (128, 11, 17)),  # printed 96 channels vs 128 kernels
    ("conv4_2", (128, 11, 17)),  # printed 96 channels vs 128 kernels
    ("pool4", (128, 5, 8)),      # follows the 128-kernel column
    ("fc5", (1024,)), ("fc6", (1,)),
]
JOINT_SHAPES = [
    ("conv1", (32, 100, 150)), ("pool1", (32, 49, 74)),
    ("conv2_1", (64, 49, 74)), ("conv2_2", (64, 49, 74)),
    ("pool2", (64, 24, 36)),
    ("conv3_1", (96, 24, 36)), ("conv3_2", (96, 24, 36)),
    ("pool3", (96, 11, 17)),
    ("conv4_1", (128, 11, 17)), ("conv4_2", (128, 11, 17)),
    ("pool4", (128, 5, 8)),
    ("fc5", (512,)), ("fc6_clsf", (5,)), ("fc6_reg", (1,)),
]
ORDINAL_SHAPES = JOINT_SHAPES[:-1] + [("fc7_reg", (1,))]


def test_shape_conformance_and_classifier_parameters():
    """Preset shape chains reproduce every printed layer shape (documented
    divergences excepted); classifier parameters within 2% of 5.4M."""
    t0 = time.time()
    for preset, expected in [("cnn-clsf-best", CLSF_SHAPES),
                             ("cnn-reg-best", REG_SHAPES),
                             ("cnn-joint-best", JOINT_SHAPES),
                             ("cnn-ordinal", ORDINAL_SHAPES)]:
        chain = dict(get_preset(preset).shape_chain())
        for layer, shape in expected:
            assert chain[layer] == shape, f"{preset}.{layer}: {chain[layer]} != {shape}"
    # the localisation net builds and maps 256x256 to a full-size heatmap
    fcn = build_network(get_preset("fcn-center-best"), seed=0)
    chain = dict(get_preset("fcn-center-best").shape_chain())
    assert chain["conv_out"] == (1, 256, 256)

    clsf = build_network(get_preset("cnn-clsf-best"), seed=0)
    n = clsf.parameter_count()
    assert abs(n - 5.4e6) / 5.4e6 < 0.02, f"classifier parameters {n}"
    elapsed = time.time() - t0
    assert elapsed < 10.0
    report("shape conformance", elapsed, 10,
           f"4 grading presets + fcn; classifier params {n:,}")


def test_joint_parameter_count_exact():
    """The joint network as printed: 3,082,310 trainable parameters
    (456,064 conv + 2,621,952 fc5 + 3,078 heads + 1,216 batch-norm)."""
    net = build_network(get_preset("cnn-joint-best"), seed=0)
    assert net.parameter_count() == 3_082_310


@pytest.mark.xfail(
    strict=True,
    reason="The published ~2.9M figure contradicts the same paper's printed "
           "joint architecture: its layer table yields 3,082,310 parameters "
           "(6.3% over), so this tolerance is unattainable for any network "
           "matching the printed shapes. The figure matches the table's "
           "layer sum only if the second conv4 layer is omitted. Recorded "
           "in the decisions ledger; the exact honest count is pinned by "
           "test_joint_parameter_count_exact.")
def test_joint_parameter_count_within_2pct_of_published():
    net = build_network(get_preset("cnn-joint-best"), seed=0)
    n = net.parameter_count()
    assert abs(n - 2.9e6) / 2.9e6 < 0.02, f"joint parameters {n}"


# ---------------------------------------------------------------------------
# criterion 3: receptive fields
# ---------------------------------------------------------------------------

def test_receptive_field_regression():
    """Computed apertures match the published {9, 11, 34, 42, 66} exactly."""
    t0 = time.time()
    cases = [("fcn-center-3x3", "conv_out", 9),
             ("fcn-center-7x7", "conv_out", 11),
             ("fcn-center-pool2", "conv_out", 34),
             ("fcn-center-pool3", "conv4", 42),
             ("fcn-center-best", "conv4_2", 66)]
    got = {receptive_field(get_preset(p), layer) for p, layer, _ in cases}
    for preset, layer, want in cases:
        assert receptive_field(get_preset(preset), layer) == want
    elapsed = time.time() - t0
    assert elapsed < 1.0
    report("receptive fields", elapsed, 1, f"apertures {sorted(got)}")


# ---------------------------------------------------------------------------
# criterion 4: metric oracles
# ---------------------------------------------------------------------------

def test_metric_oracles_randomized():
    """jaccard, classification_report, roc_auc_ovr, template_distance_map,
    otsu_threshold and connected_components each match an independent
    brute-force oracle on >= 100 random instances."""
    t0 = time.time()
    rng = np.random.default_rng(2024)

    for _ in range(100):  # jaccard vs corner arithmetic on random boxes
        a = (int(rng.integers(0, 12)), int(rng.integers(0, 12)),
             int(rng.integers(1, 10)), int(rng.integers(1, 10)))
        b = (int(rng.integers(0, 12)), int(rng.integers(0, 12)),
             int(rng.integers(1, 10)), int(rng.integers(1, 10)))
        grid = np.zeros((30, 30), dtype=int)
        grid[a[1]:a[1] + a[3], a[0]:a[0] + a[2]] += 1
        grid[b[1]:b[1] + b[3], b[0]:b[0] + b[2]] += 2
        inter = int((grid == 3).sum())
        union = int((grid > 0).sum())
        assert abs(jaccard(a, b) - inter / union) < 1e-9

    for _ in range(100):  # classification report vs direct tallies
        labels = rng.integers(0, 5, 40)
        preds = np.where(rng.random(40) < 0.5, labels, rng.integers(0, 5, 40))
        rep = classification_report(preds, labels)
        assert rep.accuracy == np.mean(preds == labels)
        g = int(rng.integers(0, 5))
        tp = np.sum((preds == g) & (labels == g))
        fp = np.sum((preds == g) & (labels != g))
        want = tp / (tp + fp) if tp + fp else 0.0
        assert abs(rep.precision[g] - want) < 1e-9

    for _ in range(100):  # AUC vs pair counting
        probs = rng.integers(0, 5, size=(10, 5)) / 5.0
        labels = rng.integers(0, 5, 10)
        aucs, _ = roc_auc_ovr(probs, labels)
        for g in range(5):
            pos = labels == g
            if pos.all() or not pos.any():
                assert aucs[g] is None
                continue
            s_pos, s_neg = probs[pos, g], probs[~pos, g]
            wins = sum((sp > sn) + 0.5 * (sp == sn)
                       for sp in s_pos for sn in s_neg)
            assert abs(aucs[g] - wins / (len(s_pos) * len(s_neg))) < 1e-9

    for _ in range(100):  # template distances vs per-pixel summation
        img = rng.integers(0, 256, (30, 30)).astype(np.uint8)
        template = rng.integers(0, 256, (10, 10)).astype(np.float64)
        dist = template_distance_map(img, template, stride=10)
        i = int(rng.integers(0, dist.shape[0]))
        j = int(rng.integers(0, dist.shape[1]))
        window = img[i * 10:i * 10 + 10, j * 10:j * 10 + 10].astype(np.float64)
        want = np.sqrt(((window - template) ** 2).sum())
        assert abs(dist[i, j] - want) < 1e-9

    for _ in range(100):  # Otsu vs exhaustive partition scan
        img = np.where(rng.random((12, 12)) > 0.5,
                       rng.integers(0, 110, (12, 12)),
                       rng.integers(110, 256, (12, 12))).astype(np.uint8)
        flat = img.reshape(-1).astype(float)
        best_t, best_v = 0, -1.0
        for t in range(255):
            lo, hi = flat[flat <= t], flat[flat > t]
            if lo.size and hi.size:
                v = lo.size * hi.size * (lo.mean() - hi.mean()) ** 2
                if v > best_v:
                    best_v, best_t = v, t
        assert otsu_threshold(img) == best_t

    for _ in range(100):  # connected components vs flood fill
        mask = rng.random((16, 16)) > 0.7
        got = connected_components(mask)
        want = _flood_fill(mask)
        assert [(c.area, c.bbox) for c in got] == [(c[0], c[1]) for c in want]

    elapsed = time.time() - t0
    assert elapsed < 60.0
    report("metric oracles", elapsed, 60, "6 oracles x 100 random instances")


def _flood_fill(mask):
    h, w = mask.shape
    seen = np.zeros_like(mask)
    comps = []
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            stack = [(sy, sx)]
            seen[sy, sx] = True
            xs, ys = [], []
            while stack:
                y, x = stack.pop()
                xs.append(x)
                ys.append(y)
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] \
                                and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
            comps.append((len(xs), (min(xs), min(ys),
                                    max(xs) - min(xs) + 1, max(ys) - min(ys) + 1)))
    comps.sort(key=lambda c: (-c[0], c[1][1], c[1][0]))
    return comps


# ---------------------------------------------------------------------------
# criterion 5: synthetic localisation
# ---------------------------------------------------------------------------

def test_synthetic_localisation(trained_fcn):
    """desk-fcn trained <= 15 epochs on 400 synthetic radiographs detects
    >= 90% of held-out joints at JI >= 0.5, inside 15 minutes."""
    t0 = time.time()
    held = synth_radiographs(SyntheticConfig.radiographs(100, noise=0.0,
                                                         seed=1111))
    network = trained_fcn["network"]
    hits = total = failures = 0
    jis = []
    for rec in held.records:
        img = held.image(rec.image)
        try:
            dets = fcn_localize_roi(hist_equalize(img), network,
                                    original_size=img.shape)
        except Exception:
            failures += 1
            total += 2
            continue
        for det in dets:
            ji = jaccard(det.bbox, rec.sides[det.side].bbox)
            jis.append(ji)
            total += 1
            hits += ji >= 0.5
    fraction = hits / total
    elapsed = trained_fcn["train_seconds"] + (time.time() - t0)
    assert FCN_EPOCHS <= 15
    assert fraction >= 0.9, f"detection fraction {fraction:.3f}"
    assert elapsed < 900.0
    report("synthetic localisation", elapsed, 900,
           f"{hits}/{total} at JI>=0.5 ({fraction:.1%}), mean JI "
           f"{np.mean(jis):.3f}, {failures} failures, "
           f"{FCN_EPOCHS} epochs in {trained_fcn['train_seconds']:.0f}s")


# ---------------------------------------------------------------------------
# criterion 6: synthetic quantification
# ---------------------------------------------------------------------------

def test_synthetic_quantification(trained_joint, held_out_knees):
    """desk-cnn joint training <= 30 epochs on 500 noise-free knees reaches
    >= 90% held-out accuracy with regression MSE <= 0.25; ordinal training
    on the same data keeps rounded-grade MSE within joint + 0.1."""
    images, labels = held_out_knees
    t0 = time.time()
    joint_preds = predict_batch(trained_joint["network"], images)
    joint_acc = float(np.mean([p.grade_discrete == l
                               for p, l in zip(joint_preds, labels)]))
    joint_mse = float(np.mean([(p.grade_continuous - l) ** 2
                               for p, l in zip(joint_preds, labels)]))

    knees = synth_knees(SyntheticConfig.knees(500, noise=0.0, seed=42))
    ordinal_net, _ = train_quantifier(
        knees, "desk-cnn-ordinal",
        TrainConfig(mode="ordinal", epochs=JOINT_EPOCHS, batch_size=32, seed=7))
    ordinal_preds = predict_batch(ordinal_net, images)
    ordinal_mse_rounded = float(np.mean(
        [(round_grade(p.grade_continuous) - l) ** 2
         for p, l in zip(ordinal_preds, labels)]))

    elapsed = trained_joint["train_seconds"] + (time.time() - t0)
    assert JOINT_EPOCHS <= 30
    assert joint_acc >= 0.90, f"joint accuracy {joint_acc:.3f}"
    assert joint_mse <= 0.25, f"joint regression MSE {joint_mse:.3f}"
    assert ordinal_mse_rounded <= joint_mse + 0.1, \
        f"ordinal rounded MSE {ordinal_mse_rounded:.3f} vs joint {joint_mse:.3f}"
    assert elapsed < 1200.0
    report("synthetic quantification", elapsed, 1200,
           f"joint acc {joint_acc:.1%}, joint reg MSE {joint_mse:.3f}, "
           f"ordinal rounded MSE {ordinal_mse_rounded:.3f}, "
           f"{JOINT_EPOCHS} epochs each")


# ---------------------------------------------------------------------------
# criterion 7: determinism
# ---------------------------------------------------------------------------

def test_training_determinism(artifacts, tmp_path):
    """Repeating a training subcommand with the same seed and config yields
    bit-identical checkpoints; repeating the pipeline yields identical
    prediction files."""
    t0 = time.time()
    data_dir = tmp_path / "data"
    ds = synth_radiographs(SyntheticConfig.radiographs(12, noise=0.0, seed=5))
    manifest = save_dataset(ds, data_dir)
    kdir = tmp_path / "knees"
    kds = synth_knees(SyntheticConfig.knees(20, noise=0.0, seed=5))
    kmanifest = save_dataset(kds, kdir)

    fcn_bytes = []
    for run in range(2):
        out = tmp_path / f"fcn{run}"
        code = cli_main(["train-fcn", "--manifest", str(manifest),
                         "--out", str(out), "--preset", "desk-fcn",
                         "--mask-mode", "roi", "--epochs", "2",
                         "--batch-size", "4", "--seed", "9"])
        assert code == 0
        fcn_bytes.append((out / "fcn.oakn").read_bytes())
    assert fcn_bytes[0] == fcn_bytes[1], "train-fcn checkpoints differ"

    cnn_bytes = []
    for run in range(2):
        out = tmp_path / f"cnn{run}"
        code = cli_main(["train-cnn", "--manifest", str(kmanifest),
                         "--out", str(out), "--mode", "joint",
                         "--epochs", "1", "--batch-size", "8", "--seed", "9"])
        assert code == 0
        cnn_bytes.append((out / "cnn.oakn").read_bytes())
    assert cnn_bytes[0] == cnn_bytes[1], "train-cnn checkpoints differ"
    elapsed = time.time() - t0
    report("determinism (training)", elapsed, 600,
           "train-fcn and train-cnn repeated bit-identically")


def test_pipeline_determinism(trained_fcn, trained_joint, tmp_path):
    t0 = time.time()
    data_dir = tmp_path / "data"
    ds = synth_radiographs(SyntheticConfig.radiographs(5, noise=0.0, seed=6))
    manifest = save_dataset(ds, data_dir)
    outputs = []
    for run in range(2):
        out = tmp_path / f"pipe{run}"
        code = cli_main(["pipeline", "--manifest", str(manifest),
                         "--fcn", str(trained_fcn["path"]),
                         "--cnn", str(trained_joint["path"]),
                         "--out", str(out)])
        assert code == 0
        outputs.append((out / "predictions.txt").read_text())
    assert outputs[0] == outputs[1], "pipeline outputs differ"
    elapsed = time.time() - t0
    report("determinism (pipeline)", elapsed, 600,
           "predictions.txt identical across repeats")


# ---------------------------------------------------------------------------
# criterion 8: end-to-end pipeline
# ---------------------------------------------------------------------------

def test_end_to_end_pipeline(trained_fcn, trained_joint, tmp_path):
    """The pipeline over 20 noise-free synthetic radiographs emits exactly
    40 knee predictions with zero localisation failures."""
    t0 = time.time()
    data_dir = tmp_path / "data"
    ds = synth_radiographs(SyntheticConfig.radiographs(20, noise=0.0, seed=77))
    manifest = save_dataset(ds, data_dir)
    out = tmp_path / "pipe"
    code = cli_main(["pipeline", "--manifest", str(manifest),
                     "--fcn", str(trained_fcn["path"]),
                     "--cnn", str(trained_joint["path"]), "--out", str(out)])
    assert code == 0, "pipeline reported localisation failures"
    rows = parse_predictions(out / "predictions.txt")
    assert len(rows) == 40
    sides = {(r["image"], r["side"]) for r in rows}
    assert len(sides) == 40  # one prediction per knee, both sides everywhere

    # grades should largely match the planted encoding end to end
    by_key = {rec.image: rec for rec in ds.records}
    correct = sum(r["grade_discrete"] == by_key[r["image"]].sides[r["side"]].grade
                  for r in rows)
    elapsed = time.time() - t0
    report("end-to-end pipeline", elapsed, 600,
           f"40 predictions, 0 failures, {correct}/40 grades match the "
           f"planted encoding")
