"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
terminal summary. Criterion 7 reads ``artifacts/desk_rd.json`` written by
``tests/desk_rd.py`` (about two hours on one core).
"""

import inspect
import json
import math
import time
from pathlib import Path

import numpy as np
import torch

from acceptance_log import report
from oracles import eca_oracle, finite_difference_check, isa_oracle
from pcac.attention import Eca, Isa, eca_forward, eca_layer, isa_forward
from pcac.cli import main as cli_main
from pcac.codec import CodecConfig, GeometryBatch, build_pyramid, decode, encode, model_init, patch_geometry
from pcac.entropy import EntropyModel, quantize, rate_estimate
from pcac.metrics import RDCurve, RDPoint, bd_psnr, bd_rate
from pcac.pointcloud import PATCH_SIZE, Patch, PointCloud, make_patches, read_ply, write_ply
from pcac.rangecoder import BitstreamError, ac_decode, ac_encode, coding_tables
from pcac.training import synth_dataset

ROOT = Path(__file__).resolve().parents[1]
DESK_RD = ROOT / "artifacts" / "desk_rd.json"


def _shaped_em(channels, seed):
    em = EntropyModel(channels, seed=seed)
    with torch.no_grad():
        for i, b in enumerate(em.biases):
            b.add_(torch.linspace(-1.5, 1.5, channels)[:, None, None] * (i + 1))
    return em


def _sample(pmf, rows, rng):
    support = np.arange(-(pmf.shape[1] // 2), pmf.shape[1] // 2 + 1)
    return np.stack([rng.choice(support, size=rows, p=r / r.sum()) for r in pmf], axis=1)


def _seeded(module, seed):
    gen = np.random.default_rng(seed)
    owners = dict(module.named_modules())
    with torch.no_grad():
        for name, p in module.named_parameters():
            bound = 1 / math.sqrt(owners[name.rsplit(".", 1)[0]].weight.shape[1])
            p.copy_(torch.from_numpy(gen.uniform(-bound, bound, tuple(p.shape))))
    return module.double()


def test_criterion_1_entropy_coding_lossless():
    t0 = time.time()
    em = _shaped_em(4, 1)
    tables = coding_tables(em)
    pmf = em.pmf_table(127)
    rng = np.random.default_rng(0)
    pool = _sample(pmf, 50_000, rng)
    failures, escapes = 0, 0
    for _ in range(10_000):
        rows = int(rng.integers(0, 9))
        sym = pool[rng.integers(0, len(pool), size=rows)].copy()
        mask = rng.random(sym.shape) < 0.05
        n_esc = int(mask.sum())
        wide = rng.integers(-2**31, 2**31, size=n_esc)
        edge = rng.choice([128, -128, 1000, -(2**31), 2**31 - 1], size=n_esc)
        sym[mask] = np.where(rng.random(n_esc) < 0.5, wide, edge)
        escapes += int((np.abs(sym) > 127).sum())
        out = ac_decode(ac_encode(sym, tables), sym.size, tables).reshape(sym.shape)
        failures += int(not np.array_equal(out, sym))

    crashes, silent = 0, 0
    ref = _sample(pmf, 200, rng)
    data = ac_encode(ref, tables)
    for trial in range(2_000):
        bad = bytearray(data)
        kind = trial % 4
        if kind == 0:
            bad[int(rng.integers(len(bad)))] ^= int(rng.integers(1, 256))
        elif kind == 1:
            bad = bad[: int(rng.integers(len(bad)))]
        elif kind == 2:
            bad = bytearray(rng.integers(0, 256, size=int(rng.integers(0, 2 * len(data)))).astype(np.uint8).tobytes())
        else:
            bad += bytes(rng.integers(0, 256, size=int(rng.integers(1, 8))).astype(np.uint8).tobytes())
        try:
            out = ac_decode(bytes(bad), ref.size, tables)
            silent += int(not np.array_equal(out.reshape(ref.shape), ref))
        except BitstreamError:
            pass
        except Exception:
            crashes += 1
    elapsed = time.time() - t0
    ok = failures == 0 and crashes == 0 and silent == 0 and escapes > 0 and elapsed < 60
    report(1, "entropy coding lossless", ok,
           f"10000 round-trips, {failures} mismatches, {escapes} escapes, 2000 fuzzed streams, "
           f"{crashes} crashes, {silent} silent corruptions, {elapsed:.1f}s")


def test_criterion_2_rate_estimate_fidelity():
    em = _shaped_em(16, 2)
    sym = _sample(em.pmf_table(127), 1_000, np.random.default_rng(3))
    est = rate_estimate(torch.from_numpy(sym).double(), em.double_copy()).item()
    actual = 8 * len(ac_encode(sym, em))
    bound = 0.02 * est + 512
    report(2, "rate estimate fidelity", abs(actual - est) <= bound,
           f"{sym.size} symbols, estimate {est:.0f} bits, actual {actual} bits, |diff| {abs(actual - est):.0f} <= {bound:.0f}")


def test_criterion_3_attention_correctness():
    g = torch.Generator().manual_seed(0)
    isa = _seeded(Isa(8), 0)
    x = torch.randn(3, 5, 3, dtype=torch.float64, generator=g)
    isa_err = np.abs(isa_forward(x, isa).detach().numpy() - isa_oracle(x.numpy(), isa)).max()

    eca = _seeded(Eca(4, 6), 1)
    f = torch.randn(3, 5, 4, dtype=torch.float64, generator=g)
    eca_err = np.abs(eca_forward(f, x, eca).detach().numpy() - eca_oracle(f.numpy(), x.numpy(), eca)).max()

    captured = []
    orig = torch.softmax

    def spy(t, dim):
        out = orig(t, dim=dim)
        captured.append(out.sum(dim=dim))
        return out

    torch.softmax = spy
    try:
        eca_forward(f, x, eca)
    finally:
        torch.softmax = orig
    sum_err = max((s - 1).abs().max().item() for s in captured)

    fd = []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        e = _seeded(Eca(3, 4), seed)
        p, feat = rng.normal(size=(12, 3)), torch.from_numpy(rng.normal(size=(12, 3)))
        fd.append(finite_difference_check(e, lambda: (eca_layer(p, feat, 4, e) ** 2).sum()))
        i = _seeded(Isa(5), seed)
        xi = torch.from_numpy(rng.normal(size=(3, 4, 3)))
        fd.append(finite_difference_check(i, lambda: (isa_forward(xi, i) ** 2).sum()))
    ok = isa_err < 1e-6 and eca_err < 1e-6 and sum_err < 1e-6 and max(fd) < 1e-4
    report(3, "ECA/ISA correctness", ok,
           f"ISA oracle err {isa_err:.1e}, ECA oracle err {eca_err:.1e}, softmax sum err {sum_err:.1e} "
           f"over {len(captured)} softmaxes, worst FD rel err {max(fd):.1e} on 3 seeds")


def test_criterion_4_zero_padding_contract():
    cfg = CodecConfig()
    model = model_init(cfg, 0)
    patch = synth_dataset(1, 4)[0]
    geom = GeometryBatch.stack([patch_geometry(patch.positions, cfg)])
    trace = []
    with torch.no_grad():
        model.decode(model.encode(torch.as_tensor(patch.colors, dtype=torch.float32)[None], geom), geom, trace)
    details, ok = [], len(trace) == cfg.num_scales
    for coarse, padded, sel in trace:
        zeros = int((padded[0] == 0).all(dim=1).sum())
        expected = padded.shape[1] - coarse.shape[1]
        exact = torch.equal(padded[0, sel[0]], coarse[0])
        ok &= zeros == expected and exact
        details.append(f"{coarse.shape[1]}->{padded.shape[1]}: {zeros}/{expected} zero rows, retained exact={exact}")
    report(4, "zero-padding contract", ok, "; ".join(details))


def test_criterion_5_permutation_invariance():
    cfg = CodecConfig()
    model = model_init(cfg, 1).double()
    patch = synth_dataset(1, 5)[0]
    perm = np.random.default_rng(6).permutation(PATCH_SIZE)
    moved = Patch(patch.positions[perm], patch.colors[perm], patch.parent_indices[perm], patch.centroid, patch.scale)

    def reconstruct(p):
        y = quantize(encode(p, model), "eval")
        return decode(y, build_pyramid(p.positions, cfg), model, clip=False)

    a, b = reconstruct(patch), reconstruct(moved)
    row_of = {tuple(pt): i for i, pt in enumerate(patch.positions)}
    match = np.array([row_of[tuple(pt)] for pt in moved.positions])
    err = np.abs(b - a[match]).max()
    report(5, "permutation invariance", err <= 1e-5, f"default config, max per-point difference {err:.2e}")


def test_criterion_6_determinism_and_geometry(tmp_path):
    cfg = CodecConfig(channels=16, k_neighbors=8)
    model_path = tmp_path / "m.a2cm"
    from pcac.checkpoint import save_checkpoint

    save_checkpoint(model_path, model_init(cfg, 2), EntropyModel(cfg.latent_channels, seed=2))
    rng = np.random.default_rng(7)
    clouds = {
        "single.ply": (PointCloud(np.array([[0.1, 0.2, 0.3]]), np.array([[0.5, 0.25, 1.0]])), "ascii"),
        "float32.ply": (PointCloud(rng.normal(size=(3000, 3)).astype(np.float32).astype(float), rng.uniform(size=(3000, 3))), "binary"),
        "double.ply": (PointCloud(rng.uniform(-50, 50, size=(4500, 3)), rng.uniform(size=(4500, 3))), "ascii"),
    }
    threads = torch.get_num_threads()
    problems = []
    try:
        for name, (pc, fmt) in clouds.items():
            src = tmp_path / name
            write_ply(pc, src, format=fmt)
            outputs = []
            for run, (jobs, nthreads) in enumerate([(1, 1), (3, 2)]):
                torch.set_num_threads(nthreads)
                stream, out = tmp_path / f"{name}.{run}.a2c", tmp_path / f"{name}.{run}.out.ply"
                assert cli_main(["compress", "--model", str(model_path), "--input", str(src),
                                 "--output", str(stream), "--jobs", str(jobs)]) == 0
                assert cli_main(["decompress", "--model", str(model_path), "--input", str(stream), "--geometry",
                                 str(src), "--output", str(out), "--jobs", str(jobs)]) == 0
                outputs.append((stream.read_bytes(), read_ply(out)))
            (s0, r0), (s1, r1) = outputs
            original = read_ply(src)
            if s0 != s1:
                problems.append(f"{name}: streams differ")
            if not (np.array_equal(r0.positions, original.positions) and np.array_equal(r1.positions, original.positions)):
                problems.append(f"{name}: positions changed")
            if not np.array_equal(r0.colors, r1.colors):
                problems.append(f"{name}: colors differ between runs")
    finally:
        torch.set_num_threads(threads)
    report(6, "codec determinism and geometry losslessness", not problems,
           "; ".join(problems) or f"{len(clouds)} PLYs, 2 runs each (jobs/threads 1/1 and 3/2), streams and outputs identical")


def test_criterion_7_desk_rd_sanity():
    if not DESK_RD.exists():
        report(7, "desk-scale RD sanity", False, f"{DESK_RD.relative_to(ROOT)} missing; run tests/desk_rd.py first")
    res = json.loads(DESK_RD.read_text())
    pts = sorted(res["points"], key=lambda p: p["lam"])
    base = res["baseline_psnr_y"]
    pareto = all(b["bpp"] <= a["bpp"] for a, b in zip(pts, pts[1:]))
    margins = [p["psnr_y"] - base for p in pts]
    curve = RDCurve("trained", [RDPoint(p["bpp"], p["psnr_y"], p["psnr_y"]) for p in pts])
    flat = RDCurve("mean color", [RDPoint(p["bpp"], base, base) for p in pts])
    gain = bd_psnr(flat, curve)
    setup_ok = (len(pts) == 4 and res["steps"] == 5000 and res["patches"] == 512
                and {p["lam"] for p in pts} == {8e-5, 1e-4, 3e-4, 6e-4})
    fast = res["seconds"] <= 7200
    ok = setup_ok and pareto and min(margins) >= 3.0 and gain > 0 and fast
    points = ", ".join(f"lam {p['lam']:g}: {p['bpp']:.3f} bpp {p['psnr_y']:.2f} dB" for p in pts)
    report(7, "desk-scale RD sanity", ok,
           f"{points}; mean-color {base:.2f} dB; (a) pareto={pareto} (b) min margin {min(margins):.2f} dB "
           f"(c) BD-PSNR {gain:+.2f} dB; {res['seconds'] / 60:.0f} min total")


def test_criterion_8_bd_oracle():
    a = RDCurve("a", [RDPoint(r, q, q) for r, q in [(0.1, 28.0), (0.25, 31.5), (0.5, 34.0), (1.0, 37.2)]])
    up = RDCurve("up", [RDPoint(p.bpp, p.psnr_y + 1, p.psnr_y + 1) for p in a.points])
    dbl = RDCurve("x2", [RDPoint(p.bpp * 2, p.psnr_y, p.psnr_y) for p in a.points])
    same_br, same_dp = bd_rate(a, a), bd_psnr(a, a)
    shift, doubled = bd_psnr(a, up), bd_rate(a, dbl)
    ok = abs(same_br) < 1e-6 and abs(same_dp) < 1e-6 and abs(shift - 1) < 1e-6 and abs(doubled - 100) < 0.1
    report(8, "BD-metric oracle", ok,
           f"identical ({same_br:.1e}%, {same_dp:.1e} dB), +1 dB shift {shift:.9f} dB, rate doubled {doubled:.6f}%")


def test_criterion_9_default_configuration():
    cfg = CodecConfig()
    patch_default = inspect.signature(make_patches).parameters["patch_size"].default
    got = (cfg.num_scales, cfg.sample_ratio, cfg.eca_layers_per_block, cfg.channels, PATCH_SIZE, patch_default)
    report(9, "default configuration", got == (2, 4, 2, 256, 2048, 2048),
           f"scales {got[0]}, ratio {got[1]}, ECA layers/block {got[2]}, width {got[3]}, patch {got[4]}")
