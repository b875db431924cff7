"""Acceptance criteria; each test reports one PASS/FAIL line in the terminal summary."""

import time

import numpy as np
import pytest

from mmproto.embed_io import decode_bank, decode_embeddings, encode_bank, encode_embeddings
from mmproto.evaluation import bench_scoring, prototype_silhouette, topk_accuracy
from mmproto.exceptions import ChecksumMismatchError
from mmproto.heads import ClassifierParams, score, score_aligned, score_conventional
from mmproto.prototypes import build_bank, fuse_visual, fusion_weights, sigma_of
from mmproto.structures import CategoryRecord, PrototypeBank, ReferenceEntry, ReferenceSet
from mmproto.synth import WorldConfig, generate_world
from mmproto.training import LossConfig, TrainConfig, _Frozen, end_to_end_loss, fit, init_params

from helpers import (
    ACCEPTANCE_LINES,
    bank_of,
    central_differences,
    gradient_agreement,
    naive_loss,
    random_instance,
)

SEEDS = range(5)
TRAIN = dict(learning_rate=1e-2, epochs=30, batch_size=256)


def report(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)
    assert ok, detail


def _bank(world, descriptions=None):
    bank = build_bank(world.descriptions, world.references, world.reference_embeddings,
                      world.manifest)
    if descriptions is not None:
        bank = PrototypeBank(descriptions, bank.V, bank.categories, bank.sigma_table_hash)
    return bank


def _heldout_top1(world, bank, heads=None, mode="supervised", split=None):
    cfg = world.config
    init = init_params(cfg.n_categories, cfg.feature_dim, cfg.text_dim, cfg.visual_dim,
                       seed=cfg.seed)
    tc = TrainConfig(**TRAIN, seed=cfg.seed, mode=mode, heads=heads)
    params, _ = fit(init, bank, [world.train], tc)
    X, y = world.heldout.X, world.heldout.labels
    if split is not None:
        keep = bank.split_mask(split)[y]
        X, y = X[keep], y[keep]
    return topk_accuracy(score(params, bank, X, mode, heads=tc.active_heads), y, 1), init, params


def test_c1_sigma_table():
    rows = [((1, 1), 1.0), ((2, 2), 0.6), ((3, 3), 0.5), ((4, 4), 0.4), ((5, 7), 0.3),
            ((8, 10), 0.2), ((11, 20), 0.15), ((21, 50), 0.12), ((51, 100), 0.10)]
    bad = [(n, sigma_of(n), s) for (lo, hi), s in rows for n in range(lo, hi + 1)
           if sigma_of(n) != s]
    report(1, not bad, f"9 buckets, 100 counts checked exactly, mismatches={bad}")


def test_c2_fusion_invariants():
    t0 = time.perf_counter()
    sums_ok = all(abs(float(fusion_weights(n).astype(np.float32).sum(dtype=np.float32)) - 1)
                  < 1e-6 for n in range(1, 101))
    rng = np.random.default_rng(2)
    one = rng.standard_normal((1, 16)).astype(np.float32)
    identity_ok = fuse_visual(ReferenceSet(0, [ReferenceEntry(0, 9, True)]), one).tobytes() \
        == one[0].tobytes()
    oracle_ok = True
    for _ in range(200):
        n = int(rng.integers(1, 101))
        emb = rng.standard_normal((n, 8)).astype(np.float32)
        refs = ReferenceSet(0, [ReferenceEntry(i, 1000 - i, i == 0) for i in range(n)])
        sigma = sigma_of(n)
        expect = []
        for k in range(8):
            acc = float(emb[0, k]) if n == 1 else sigma * float(emb[0, k])
            for i in range(1, n):
                acc = acc + (1.0 - sigma) / (n - 1) * float(emb[i, k])
            expect.append(acc)
        oracle_ok &= fuse_visual(refs, emb).tobytes() == np.array(expect, np.float32).tobytes()
    elapsed = time.perf_counter() - t0
    ok = sums_ok and identity_ok and oracle_ok and elapsed < 1.0
    report(2, ok, f"sums={sums_ok} n1-identity={identity_ok} oracle(200)={oracle_ok} "
                  f"time={elapsed:.2f}s")


def test_c3_gradient_verification():
    t0 = time.perf_counter()
    arms = {"supervised": ("con", "text", "vis"), "open_vocab": ("text", "vis")}
    worst_rel = worst_abs = 0.0
    failures, checked = [], 0
    for arm, heads in arms.items():
        for kind in ("bce_sigmoid", "focal"):
            for seed in range(20):
                theta, T, V, X, labels = random_instance(1000 + seed)
                frozen = _Frozen(bank_of(T, V))
                _, grads = end_to_end_loss(theta, X, labels, frozen, heads, 100.0, True,
                                           LossConfig(kind))
                names = [k for k, h in (("W", "con"), ("P_t", "text"), ("P_v", "vis"))
                         if h in heads]
                numeric = central_differences(
                    lambda th: naive_loss(th, T, V, X, labels, heads, 100.0, True, kind),
                    theta, names)
                ok, rel, err = gradient_agreement(grads, numeric)
                worst_rel, worst_abs = max(worst_rel, rel), max(worst_abs, err)
                checked += 1
                if not ok:
                    failures.append((arm, kind, seed))
    elapsed = time.perf_counter() - t0
    report(3, not failures and elapsed < 30,
           f"{checked} instances, worst rel err {worst_rel:.1e} abs err {worst_abs:.1e}, "
           f"failures={failures}, "
           f"time={elapsed:.1f}s")


@pytest.fixture(scope="module")
def default_worlds():
    return {seed: generate_world(WorldConfig(seed=seed)) for seed in SEEDS}


@pytest.mark.slow
def test_c4_classifier_ordering(default_worlds):
    t0 = time.perf_counter()
    acc = {k: [] for k in ("classname", "description", "visual", "conventional", "ensemble")}
    for seed, world in default_worlds.items():
        bank = _bank(world)
        acc["classname"].append(_heldout_top1(world, _bank(world, world.classnames), ("text",))[0])
        acc["description"].append(_heldout_top1(world, bank, ("text",))[0])
        acc["visual"].append(_heldout_top1(world, bank, ("vis",))[0])
        acc["conventional"].append(_heldout_top1(world, bank, ("con",))[0])
        acc["ensemble"].append(_heldout_top1(world, bank)[0])
    mean = {k: float(np.mean(v)) for k, v in acc.items()}
    singles = ("description", "visual", "conventional")
    best_single = max(mean[k] for k in singles)
    per_seed = all(acc["ensemble"][i] >= max(acc[k][i] for k in singles) - 0.005
                   for i in range(len(SEEDS)))
    elapsed = time.perf_counter() - t0
    ok = (mean["description"] > mean["classname"] and per_seed
          and mean["ensemble"] > best_single and elapsed < 300)
    detail = " ".join(f"{k}={v:.4f}" for k, v in mean.items())
    report(4, ok, f"mean top1 {detail}; ensemble within 0.5pp per seed={per_seed}; "
                  f"time={elapsed:.0f}s")


@pytest.mark.slow
def test_c5_reference_count_monotone():
    t0 = time.perf_counter()
    means = []
    for n in (1, 10, 100):
        accs = []
        for seed in SEEDS:
            world = generate_world(WorldConfig(seed=seed, refs_per_category={"fixed": n}))
            accs.append(_heldout_top1(world, _bank(world), ("vis",))[0])
        means.append(float(np.mean(accs)))
    drops = [a - b for a, b in zip(means, means[1:]) if b < a]
    elapsed = time.perf_counter() - t0
    ok = len(drops) <= 1 and all(d <= 0.003 for d in drops) and elapsed < 300
    report(5, ok, f"visual top1 n=1/10/100: {means[0]:.4f}/{means[1]:.4f}/{means[2]:.4f}; "
                  f"time={elapsed:.0f}s")


def test_c6_separability(default_worlds):
    t0 = time.perf_counter()
    pairs = [(prototype_silhouette(w.descriptions, seed=s), prototype_silhouette(w.classnames, seed=s))
             for s, w in default_worlds.items()]
    elapsed = time.perf_counter() - t0
    ok = all(d > c for d, c in pairs) and elapsed < 60
    report(6, ok, "silhouette description/classname per seed: "
                  + ", ".join(f"{d:.3f}/{c:.3f}" for d, c in pairs) + f"; time={elapsed:.1f}s")


def test_c7_open_vocabulary():
    t0 = time.perf_counter()
    results, w_fixed = [], True
    for seed in SEEDS:
        world = generate_world(WorldConfig(seed=seed, novel_fraction=0.3))
        top1, init, params = _heldout_top1(world, _bank(world), mode="open_vocab", split="novel")
        results.append(top1)
        w_fixed &= params.W.tobytes() == init.W.tobytes()
    chance5 = 5 / 200
    elapsed = time.perf_counter() - t0
    ok = all(r > chance5 for r in results) and w_fixed and elapsed < 300
    report(7, ok, "novel top1 per seed " + ", ".join(f"{r:.3f}" for r in results)
                  + f" vs 5x chance {chance5:.3f}; W bit-identical={w_fixed}; time={elapsed:.0f}s")


def test_c8_throughput():
    first = bench_scoring(13204, 768, 1000, seed=0, threads=1, repeats=3)
    second = bench_scoring(13204, 768, 1000, seed=0, threads=1)
    same = first["checksum"] == second["checksum"]
    ok = first["wall_time_s"] < 2.0 and same
    report(8, ok, f"C=13204 L=768 N=1000 single-threaded best-of-3 "
                  f"{first['wall_time_s']:.3f}s, checksum stable={same}")


def test_c9_serialization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    tiny = np.finfo(np.float32).smallest_subnormal
    pemb_ok = bank_ok = corrupt_ok = True
    for i in range(100):
        rows, dims = (int(v) for v in rng.integers(1, 12, size=2))
        m = rng.standard_normal((rows, dims)).astype(np.float32)
        flat = m.reshape(-1)
        picks = rng.choice(flat.size, size=min(3, flat.size), replace=False)
        flat[picks[0]] = -0.0
        if flat.size > 1:
            flat[picks[1]] = tiny * rng.integers(1, 1000)
        if flat.size > 2:
            flat[picks[2]] = -tiny
        pemb_ok &= decode_embeddings(encode_embeddings(m)).tobytes() == m.tobytes()
        cats = [CategoryRecord(c, f"cat{c}", "novel" if c % 3 == 0 else "base", c % 2 == 0)
                for c in range(rows)]
        V = rng.standard_normal((rows, dims + 1)).astype(np.float32)
        bank = PrototypeBank(m, V, cats, f"hash{i}")
        blob = bytearray(encode_bank(bank))
        bank_ok &= decode_bank(bytes(blob)) == bank
        blob[20 + int(rng.integers(0, m.nbytes))] ^= 0x10
        try:
            decode_bank(bytes(blob))
            corrupt_ok = False
        except ChecksumMismatchError:
            pass
        raw = bytearray(encode_embeddings(m))
        raw[16] ^= 0x01
        try:
            decode_embeddings(bytes(raw))
            corrupt_ok = False
        except ChecksumMismatchError:
            pass
    elapsed = time.perf_counter() - t0
    ok = pemb_ok and bank_ok and corrupt_ok and elapsed < 10
    report(9, ok, f"100 matrices with denormals and -0: pemb={pemb_ok} bank={bank_ok} "
                  f"corruption detected={corrupt_ok}; time={elapsed:.2f}s")


def test_c10_head_consistency():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(20):
        C, L, N = (int(v) for v in rng.integers(2, 40, size=3))
        T = rng.standard_normal((C, L)).astype(np.float32)
        X = rng.standard_normal((N, L)).astype(np.float32)
        eye = np.eye(L, dtype=np.float32)
        params = ClassifierParams(T.copy(), eye, eye, conventional_normalized=True)
        diff = np.abs(score_conventional(params, X) - score_aligned(T, eye, X, params.tau))
        worst = max(worst, float(diff.max()))
    report(10, worst <= 1e-5, f"max |S_con - S_text| over 20 random cases = {worst:.2e}")
