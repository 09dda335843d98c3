"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also repeated in the terminal summary.
"""

import struct
import time

import numpy as np

from gapnet import nnops as nn
from gapnet import tensorcore as tc
from gapnet.backbone import Backbone, BackboneConfig, InvertedResidual
from gapnet.dataio import (
    FlowMagicError,
    FlowTruncatedError,
    RunConfig,
    checkpoint_read,
    checkpoint_write,
    make_blob_dataset,
    read_flo,
    scan_dataset,
)
from gapnet.gapblocks import CSA, GFE, GPC, CSAConfig, GFEConfig, GPCConfig, zero_parameters
from gapnet.labels import center_count, decompose, edt_with_indices
from gapnet.losses import overall_loss
from gapnet.metrics import F_BETA2, e_curve, e_measure, e_thresholds, evaluate_pair, f_weighted, s_measure
from gapnet.model import (
    PAPER_CSA_PARAMS,
    PAPER_GPC_PARAMS,
    PAPER_MACS,
    SUPERVISION_SETTINGS,
    ModelConfig,
    build_model,
    count_macs,
    count_params,
    csa_token_lengths,
    fuse_low_video,
)
from gapnet.pipeline import train, training_mae
from gapnet.tensorcore import Tensor, grad_check

from .conftest import t64
from .test_labels import brute_decompose, brute_edt, random_mask
from .test_losses import _fake_outputs, _targets
from .test_metrics import FIXTURES, oracle_e_curve, oracle_f_weighted, oracle_s_measure

RESULTS: list[str] = []


class Checks:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.failed: list[str] = []
        self.notes: list[str] = []

    def check(self, ok: bool, what: str) -> None:
        if not ok:
            self.failed.append(what)

    def note(self, text: str) -> None:
        self.notes.append(text)

    def finish(self) -> None:
        status = "PASS" if not self.failed else "FAIL"
        detail = "; ".join(self.notes + [f"failed: {f}" for f in self.failed])
        line = f"criterion {self.number:>2} {status}  {self.title}" + (f"  [{detail}]" if detail else "")
        RESULTS.append(line)
        print(line)
        assert not self.failed, line


def _weighted_sum(fn, shape, rng):
    r = t64(rng.standard_normal(shape))
    return lambda *a: tc.reduce_sum(tc.mul(fn(*a), r))


def _primitive_checks(rng):
    """(name, report) for every differentiable primitive at float64."""
    a = t64(rng.standard_normal((2, 3, 5, 5)))
    out = []

    def run(name, fn, inputs, shape, **kw):
        out.append((name, grad_check(_weighted_sum(fn, shape, rng), inputs, seed=len(out), **kw)))

    m = t64(rng.standard_normal((2, 4)))
    v = t64(rng.standard_normal((4,)))
    run("add", tc.add, [m, v], (2, 4))
    run("sub", tc.sub, [m, v], (2, 4))
    run("mul", tc.mul, [m, v], (2, 4))
    run("scale", lambda x: tc.scale(x, 1.7), [m], (2, 4))
    away = t64(np.where(np.abs(m.data) < 0.1, 0.5, m.data))
    run("relu", tc.relu, [away], (2, 4))
    run("sigmoid", tc.sigmoid, [m], (2, 4))
    run("softmax", tc.softmax, [m], (2, 4))
    run("matmul", tc.matmul, [m, t64(rng.standard_normal((4, 3)))], (2, 3))
    run("reshape/permute", lambda x: tc.permute(tc.reshape(x, (4, 2)), (1, 0)), [m], (2, 4))
    run("tokens", lambda x: tc.tokens_to_map(tc.flatten_tokens(x), 5, 5), [a], a.shape)
    run("concat", lambda x, y: tc.concat([x, y], axis=1), [m, m], (2, 8))
    run("split", lambda x: tc.split(x, [1, 3], axis=1)[1], [m], (2, 3))
    run("reduce_mean", lambda x: tc.reduce_mean(x, axes=1), [m], (2,))
    w = t64(rng.standard_normal((4, 3, 3, 3)) * 0.3)
    b = t64(rng.standard_normal(4))
    run("conv2d", lambda x, ww, bb: nn.conv2d(x, ww, bb, 1, 2, 2), [a, w, b], (2, 4, 5, 5), samples=40)
    run("conv2d grouped", lambda x, ww: nn.conv2d(x, ww, None, 2, 1, 1, 3), [a, t64(rng.standard_normal((3, 1, 3, 3)))], (2, 3, 3, 3), samples=40)
    gam, bet = t64(rng.uniform(0.5, 1.5, 3)), t64(rng.standard_normal(3))

    def bn(x, g, bb):
        return nn.batchnorm2d(x, g, bb, np.zeros(3), np.ones(3), training=True)

    run("batchnorm2d", bn, [a, gam, bet], a.shape, samples=40)
    tok = t64(rng.standard_normal((2, 6, 3)))
    run("layernorm", nn.layernorm, [tok, gam, bet], tok.shape)
    run("linear", nn.linear, [tok, t64(rng.standard_normal((3, 4))), v], (2, 6, 4))
    run("adaptive_avg_pool2d", lambda x: nn.adaptive_avg_pool2d(x, 3), [a], (2, 3, 3, 3))
    run("bilinear_upsample", lambda x: nn.bilinear_upsample(x, (9, 11)), [a], (2, 3, 9, 11))
    return out


def _block_checks(rng):
    out = []

    def params64(module):
        module.astype(np.float64)
        return [p for _, p in module.named_parameters()]

    gpc = GPC(GPCConfig(16, m=3), rng=np.random.default_rng(0)).eval()
    x = t64(rng.standard_normal((2, 16, 6, 6)))
    out.append(("GPC", grad_check(_weighted_sum(lambda i, *p: gpc(i), x.shape, rng), [x, *params64(gpc)], samples=40)))
    csa = CSA(CSAConfig(dim=8, ffn_expansion=2), (4, 6), rng=np.random.default_rng(0))
    x1, x2 = t64(rng.standard_normal((2, 6, 4))), t64(rng.standard_normal((2, 3, 6)))
    out.append(("CSA", grad_check(_weighted_sum(lambda a, b, *p: csa(a, b), (2, 9, 8), rng), [x1, x2, *params64(csa)], samples=40)))
    gfe = GFE(GFEConfig(channels=16, inner_dim=8, hidden=16), rng=np.random.default_rng(0)).eval()
    x = t64(rng.standard_normal((2, 16, 2, 3)))
    out.append(("GFE", grad_check(_weighted_sum(lambda i, *p: gfe(i), x.shape, rng), [x, *params64(gfe)], samples=40)))
    return out


def test_criterion_01_gradients():
    c = Checks(1, "finite-difference gradient checks")
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, rep in _primitive_checks(rng) + _block_checks(rng):
        worst = max(worst, rep.max_rel_error)
        c.check(rep.max_rel_error < 1e-4, f"{name} rel err {rep.max_rel_error:.2e}")
    c.note(f"primitives+blocks worst {worst:.1e} < 1e-4")

    from .test_model import _image, _toy_batch

    model = build_model(ModelConfig.toy(), seed=0).astype(np.float64).train()
    x, targets = _image(n=2, dtype=np.float64), _toy_batch()
    rep = grad_check(lambda *_: overall_loss(model(x), targets).overall, model.parameters(), tol=1e-3, eps=1e-6, samples=32)
    c.check(rep.checked == 32, f"full model sampled {rep.checked} entries")
    c.check(rep.max_rel_error < 1e-3, f"full model rel err {rep.max_rel_error:.2e}")
    c.note(f"full model {rep.max_rel_error:.1e} < 1e-3")
    elapsed = time.perf_counter() - t0
    c.check(elapsed < 300, f"runtime {elapsed:.0f} s")
    c.note(f"{elapsed:.1f} s")
    c.finish()


def test_criterion_02_residual_identities():
    c = Checks(2, "zero-weight residual identities")
    rng = np.random.default_rng(1)
    for training in (False, True):
        gpc = GPC(GPCConfig(16, m=3), rng=np.random.default_rng(0))
        zero_parameters(gpc)
        gpc.train(training)
        x = Tensor(rng.standard_normal((2, 16, 9, 9)).astype(np.float32))
        c.check(gpc(x).data.tobytes() == x.data.tobytes(), f"GPC training={training}")
    gfe = GFE(GFEConfig(channels=32, inner_dim=8, hidden=16), rng=np.random.default_rng(0))
    zero_parameters(gfe)
    x = Tensor(rng.standard_normal((2, 32, 3, 4)).astype(np.float32))
    c.check(gfe.eval()(x).data.tobytes() == x.data.tobytes(), "GFE")
    blocks = 0
    for m in Backbone(BackboneConfig.paper(), seed=0).modules():
        if isinstance(m, InvertedResidual) and m.use_residual:
            zero_parameters(m)
            cin = list(m.conv.children())[-1][1].weight.shape[0]
            x = Tensor(rng.standard_normal((1, cin, 6, 6)).astype(np.float32))
            c.check(m.eval()(x).data.tobytes() == x.data.tobytes(), f"backbone block {blocks}")
            blocks += 1
    c.check(blocks == 10, f"{blocks} residual backbone blocks")
    c.note(f"GPC, GFE and {blocks} backbone blocks bit-exact")
    c.finish()


def test_criterion_03_edt_and_decomposition():
    c = Checks(3, "EDT and decomposition oracles")
    rng = np.random.default_rng(2024)
    for i in range(200):
        m = random_mask(rng, size=32)
        got, want = edt_with_indices(m), brute_edt(m)
        c.check(all(np.array_equal(a, b) for a, b in zip(got, want)), f"EDT mask {i}")
        lab = decompose(m)
        c.check(np.array_equal(lab.region, brute_decompose(m)), f"decompose mask {i}")
        fg = (m != 0).astype(np.uint8)
        b, ce, o = lab.boundary, lab.center, lab.others
        n = int(fg.sum())
        partition = ((b + ce + o) == fg).all() and ce.sum() == min(center_count(n, 0.2), n - int(b.sum()))
        c.check(bool(partition), f"partition mask {i}")
    c.note("200 random 32x32 masks")
    c.finish()


def test_criterion_04_metrics():
    c = Checks(4, "metric identity and transcription oracles")
    g = np.zeros((24, 32), bool)
    g[5:18, 6:25] = True
    vals = evaluate_pair(g.astype(float), g).values()
    for name, got, want in zip(("mae", "fmax", "wF", "S", "Emax", "Emean"), vals, (0, 1, 1, 1, 1, 1)):
        c.check(abs(got - want) <= 1e-6, f"identity {name}={got}")
    c.check(F_BETA2 == 0.3, f"F beta2 {F_BETA2}")
    for name, p, g in FIXTURES:
        c.check(abs(f_weighted(p, g) - oracle_f_weighted(p, g)) <= 1e-6, f"wF {name}")
        c.check(abs(s_measure(p, g) - oracle_s_measure(p, g)) <= 1e-6, f"S {name}")
        want = oracle_e_curve(p, g, e_thresholds())
        emax, emean = e_measure(p, g)
        ok = np.abs(e_curve(p, g) - want).max() <= 1e-6 and abs(emax - want.max()) <= 1e-6 and abs(emean - want.mean()) <= 1e-6
        c.check(bool(ok), f"E {name}")
    c.note(f"{len(FIXTURES)} fixtures, {FIXTURES[0][2].shape} to {FIXTURES[-2][2].shape}")
    c.finish()


def test_criterion_05_efficiency():
    c = Checks(5, "parameter and MAC budget at 384, paper preset")
    t0 = time.perf_counter()
    model = build_model(ModelConfig.paper())
    params = count_params(model)
    macs = count_macs(model, 384)
    elapsed = time.perf_counter() - t0
    total = params["total"]
    c.check(1.79e6 <= total <= 2.19e6, f"params {total}")
    c.check(abs(macs.total - PAPER_MACS) <= 0.25 * PAPER_MACS, f"MACs {macs.total}")
    for site, v in params["sites"].items():
        ref = PAPER_CSA_PARAMS if site.startswith("csa") else PAPER_GPC_PARAMS
        c.check(abs(v - ref) <= 0.30 * ref, f"site {site} {v}")
    c.check(elapsed < 10, f"profile {elapsed:.1f} s")
    c.note(f"params {total / 1e6:.3f}M, MACs {macs.total / 1e9:.3f}G ({macs.total / PAPER_MACS - 1:+.1%}), {elapsed:.1f} s")
    c.finish()


def test_criterion_06_csa_tokens():
    c = Checks(6, "CSA token arithmetic")
    lq, lk = csa_token_lengths(384)
    c.check((lq, lk) == (720, 144), f"lengths {lq}, {lk}")
    c.check(lk * 5 == lq, "K/V is one fifth of Q")
    # the toy model shares the strides, so its forward at 384 exercises the same extents
    m = build_model(ModelConfig.toy()).eval()
    with tc.no_tape():
        m(Tensor(np.zeros((1, 3, 384, 384), np.float32)))
    for site in ("csa_h", "csa_2"):
        shape = getattr(m, site).attn.last_weights_shape
        c.check(shape[-2:] == (720, 144), f"{site} attention extent {shape}")
    c.note("Q 720, K/V 144, attention 720x144")
    c.finish()


def test_criterion_07_overfit(tmp_path):
    c = Checks(7, "overfit 8 blobs, deterministic rerun")
    root = make_blob_dataset(tmp_path / "blobs", n=8, size=64, seed=0)
    run = RunConfig(preset="toy", lr=3e-3, batch_size=8, train_sizes=(64,), infer_size=64, epochs=300)
    t0 = time.perf_counter()
    model, man = train(root, run, tmp_path / "a", flip=False, max_steps=300)
    elapsed = time.perf_counter() - t0
    score = training_mae(model, scan_dataset(root), 64)
    c.check(man.steps <= 500, f"{man.steps} steps")
    c.check(score < 0.05, f"training MAE {score:.4f}")
    c.check(elapsed < 180, f"train time {elapsed:.0f} s")
    _, man2 = train(root, run, tmp_path / "b", flip=False, max_steps=300)
    c.check(man2.losses == man.losses, "rerun loss log differs")
    c.note(f"{man.steps} steps, MAE {score:.4f}, {elapsed:.0f} s, rerun identical={man2.losses == man.losses}")
    c.finish()


def test_criterion_08_ablation_wiring():
    c = Checks(8, "ablation switches")
    out, t = _fake_outputs(), _targets()
    values = {s: overall_loss(out, t, s).overall.item() for s in sorted(SUPERVISION_SETTINGS)}
    c.check(sorted(values) == list("abcdef"), f"settings {sorted(values)}")
    keys = list(values)
    gaps = [abs(values[a] - values[b]) for i, a in enumerate(keys) for b in keys[i + 1 :]]
    c.check(min(gaps) > 1e-6, f"smallest pairwise gap {min(gaps):.2e}")
    c.check(ModelConfig.paper().supervision_setting == "f" and RunConfig().supervision_setting == "f", "default setting")
    x = Tensor(np.random.default_rng(0).standard_normal((1, 16, 28, 28)).astype(np.float32))
    for m in (1, 3, 7, 28):
        blk = GPC(GPCConfig(16, m=m), rng=np.random.default_rng(0)).eval()
        c.check(blk(x).shape == x.shape and blk.cfg.m == m, f"GPC m={m}")
    plain = GPC(GPCConfig(16, attention=False)).eval()
    c.check(plain(x).shape == x.shape and not any(n.startswith("attn") for n, _ in plain.named_parameters()), "GPC w/o attention")
    cfg = RunConfig(preset="toy", gpc_m=3).model_config()
    c.check(cfg.gpc.m == 3, "gpc_m reaches the model config")
    c.note(f"min gap {min(gaps):.3f}, m in (1, 3, 7, 28), no-attention mode")
    c.finish()


def test_criterion_09_io(tmp_path):
    c = Checks(9, "checkpoint and .flo I/O")
    sd = build_model(ModelConfig.paper()).state_dict()
    checkpoint_write(tmp_path / "m.gapn", sd)
    back = checkpoint_read(tmp_path / "m.gapn").tensors
    c.check(list(back) == list(sd), "tensor names and order")
    c.check(all(back[k].tobytes() == v.tobytes() and back[k].shape == v.shape for k, v in sd.items()), "tensor bytes")
    header = struct.pack("<f", 202021.25) + struct.pack("<ii", 2, 1)
    (tmp_path / "ok.flo").write_bytes(header + struct.pack("<4f", 1, 2, 3, 4))
    uv = read_flo(tmp_path / "ok.flo").uv
    c.check(uv.shape == (1, 2, 2) and uv.ravel().tolist() == [1, 2, 3, 4], "conformant .flo")
    (tmp_path / "magic.flo").write_bytes(struct.pack("<f", 1.0) + header[4:] + struct.pack("<4f", 1, 2, 3, 4))
    (tmp_path / "short.flo").write_bytes(header + struct.pack("<3f", 1, 2, 3))
    for name, err in (("magic", FlowMagicError), ("short", FlowTruncatedError)):
        try:
            read_flo(tmp_path / f"{name}.flo")
            c.check(False, f"{name} accepted")
        except (FlowMagicError, FlowTruncatedError) as exc:
            c.check(type(exc) is err, f"{name} raised {type(exc).__name__}")
    c.note(f"{len(sd)} paper tensors bit-exact, distinct flow errors")
    c.finish()


def test_criterion_10_video():
    c = Checks(10, "video path")
    m = build_model(ModelConfig.toy(mode="video")).eval()
    rng = np.random.default_rng(0)
    rgb = Tensor(rng.standard_normal((1, 3, 64, 64)).astype(np.float32))
    flow = Tensor(rng.standard_normal((1, 2, 64, 64)).astype(np.float32))
    diff = float(np.abs(m.forward_video(rgb, flow, neutralize_flow=True).p3.data - m.forward_image(rgb).p3.data).max())
    c.check(diff <= 1e-6, f"neutralized diff {diff:.2e}")
    feat = rng.standard_normal((2, 4, 5, 5))
    zero = fuse_low_video(t64(feat), t64(np.zeros_like(feat))).data
    c.check(np.abs(zero - 1.5 * feat).max() <= 1e-12, "flow=0 gives 1.5 rgb")
    f = rng.standard_normal(feat.shape)
    want = feat / (1 + np.exp(-f)) + feat + f
    c.check(np.abs(fuse_low_video(t64(feat), t64(f)).data - want).max() <= 1e-12, "gated fusion closed form")
    c.note(f"neutralized max diff {diff:.1e}")
    c.finish()
