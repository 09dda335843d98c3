import struct
import warnings

import numpy as np
import pytest
from PIL import Image

from gapnet.dataio import (
    CKPT_MAGIC,
    CONFIG_KEYS,
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    DatasetError,
    FlowMagicError,
    FlowTruncatedError,
    ImageReadError,
    MaskError,
    RunConfig,
    checkpoint_read,
    checkpoint_write,
    flow_to_image,
    load_image,
    load_mask,
    load_prediction,
    parse_config,
    parse_config_text,
    read_flo,
    save_gray,
    save_palette,
    scan_dataset,
    write_flo,
)
from gapnet.labels import PALETTE
from gapnet.model import ModelConfig, build_model


def _flo_bytes(magic, w, h, values):
    return struct.pack("<f", magic) + struct.pack("<ii", w, h) + struct.pack(f"<{len(values)}f", *values)


def test_load_image_conventions(tmp_path):
    Image.fromarray(np.full((10, 8, 3), 255, np.uint8)).save(tmp_path / "white.png")
    t = load_image(tmp_path / "white.png", mean=(0, 0, 0), std=(1, 1, 1))
    assert t.shape == (1, 3, 10, 8) and (t.data == 1.0).all()
    Image.fromarray(np.arange(80, dtype=np.uint8).reshape(10, 8)).save(tmp_path / "gray.png")
    t = load_image(tmp_path / "gray.png", mean=(0, 0, 0), std=(1, 1, 1))
    assert (t.data[0, 0] == t.data[0, 1]).all() and (t.data[0, 1] == t.data[0, 2]).all()
    Image.fromarray(np.zeros((100, 80, 3), np.uint8)).save(tmp_path / "big.png")
    assert load_image(tmp_path / "big.png", 384).shape == (1, 3, 384, 384)


def test_load_mask_threshold(tmp_path):
    Image.fromarray(np.array([[0, 127, 128, 255]], np.uint8)).save(tmp_path / "m.png")
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), [[0, 0, 1, 1]])
    (tmp_path / "empty.png").write_bytes(b"")
    with pytest.raises(ImageReadError):
        load_mask(tmp_path / "empty.png")
    rgb = np.zeros((2, 2, 3), np.uint8)
    rgb[0, 0] = (255, 0, 0)
    Image.fromarray(rgb).save(tmp_path / "rgb.png")
    with pytest.raises(MaskError):
        load_mask(tmp_path / "rgb.png")


def test_gray_and_palette_roundtrip(tmp_path):
    v = np.linspace(0, 1, 12).reshape(3, 4)
    save_gray(tmp_path / "p.png", v)
    back = load_prediction(tmp_path / "p.png")
    assert np.abs(back - v).max() <= 0.5 / 255 + 1e-12
    assert load_prediction(tmp_path / "p.png", (6, 8)).shape == (6, 8)
    idx = np.array([[0, 1], [2, 3]], np.uint8)
    save_palette(tmp_path / "r.png", idx, PALETTE)
    with Image.open(tmp_path / "r.png") as im:
        assert im.mode == "P"
        np.testing.assert_array_equal(np.asarray(im), idx)
        gray = np.asarray(im.convert("L"))
    np.testing.assert_array_equal(gray, [[0, 85], [255, 170]])


def test_flo_reader(tmp_path):
    f = tmp_path / "ok.flo"
    f.write_bytes(_flo_bytes(202021.25, 2, 1, [1, 0, 0, 1]))
    flow = read_flo(f)
    assert (flow.height, flow.width) == (1, 2)
    np.testing.assert_array_equal(flow.uv[0], [[1, 0], [0, 1]])
    bad = tmp_path / "bad.flo"
    bad.write_bytes(_flo_bytes(202021.5, 2, 1, [1, 0, 0, 1]))
    with pytest.raises(FlowMagicError):
        read_flo(bad)
    short = tmp_path / "short.flo"
    short.write_bytes(_flo_bytes(202021.25, 2, 1, [1, 0, 0]))
    with pytest.raises(FlowTruncatedError, match="expected 28 bytes, got 24"):
        read_flo(short)
    assert not issubclass(FlowMagicError, FlowTruncatedError) and not issubclass(FlowTruncatedError, FlowMagicError)


def test_flo_roundtrip_and_image(tmp_path):
    uv = np.random.default_rng(0).standard_normal((5, 7, 2)).astype(np.float32)
    write_flo(tmp_path / "x.flo", uv)
    assert read_flo(tmp_path / "x.flo").uv.tobytes() == uv.tobytes()
    img = flow_to_image(uv)
    assert img.shape == (3, 5, 7)
    for c in range(3):
        assert img[c].min() == 0 and img[c].max() == pytest.approx(1)


def test_checkpoint_roundtrip_model(tmp_path):
    sd = build_model(ModelConfig.toy()).state_dict()
    checkpoint_write(tmp_path / "m.gapn", sd)
    back = checkpoint_read(tmp_path / "m.gapn").tensors
    assert list(back) == list(sd)
    for k, v in sd.items():
        assert back[k].dtype == np.float32 and back[k].shape == v.shape
        assert back[k].tobytes() == v.astype(np.float32).tobytes()


def test_checkpoint_f64_and_scalars(tmp_path):
    t = {"a": np.float64(3.5), "b": np.arange(6, dtype=np.float64).reshape(1, 2, 3) / 7}
    checkpoint_write(tmp_path / "c.gapn", t, dtype_code=1)
    back = checkpoint_read(tmp_path / "c.gapn").tensors
    assert back["a"].shape == () and back["b"].tobytes() == t["b"].tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError, match="duplicate"):
        checkpoint_write(tmp_path / "d.gapn", [("x", np.zeros(1)), ("x", np.ones(1))])
    checkpoint_write(tmp_path / "v.gapn", {"x": np.zeros(2)})
    raw = bytearray((tmp_path / "v.gapn").read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    (tmp_path / "v2.gapn").write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="version 2"):
        checkpoint_read(tmp_path / "v2.gapn")
    good = (tmp_path / "v.gapn").read_bytes()
    (tmp_path / "t.gapn").write_bytes(good[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_read(tmp_path / "t.gapn")
    (tmp_path / "x.gapn").write_bytes(good + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint_read(tmp_path / "x.gapn")
    assert good[:4] == CKPT_MAGIC


def test_scan_dataset_image(tmp_path, blob_root):
    recs = scan_dataset(blob_root)
    assert len(recs) == 8 and [r.image_path.stem for r in recs] == sorted(r.image_path.stem for r in recs)
    root = tmp_path / "ds"
    for sub in ("images", "masks"):
        (root / sub).mkdir(parents=True)
    for i in range(3):
        for sub in ("images", "masks"):
            Image.fromarray(np.zeros((4, 4), np.uint8)).save(root / sub / f"{i}.png")
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(root / "images" / "orphan.png")
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        recs = scan_dataset(root)
    assert len(recs) == 3 and len(w) == 1 and "orphan" in str(w[0].message)
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError):
        scan_dataset(tmp_path / "empty")


def test_scan_dataset_video(tmp_path):
    from gapnet.dataio import make_blob_dataset

    root = make_blob_dataset(tmp_path / "v", n=1, size=32, video_frames=10)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        recs = scan_dataset(root, "video")
    assert len(recs) == 9 and len(w) == 1
    assert all(r.flow_path is not None for r in recs)
    assert [r.frame_index for r in recs] == list(range(1, 10))


def test_config_defaults_and_keys(tmp_path):
    (tmp_path / "empty.cfg").write_text("")
    model_cfg, run = parse_config(tmp_path / "empty.cfg")
    assert run == RunConfig()
    assert (run.lr, run.lr_power, run.epochs, run.train_sizes) == (1.7e-4, 0.9, 30, (320, 352, 384))
    assert model_cfg.gpc.m == 7 and model_cfg.supervision_setting == "f"
    assert len(CONFIG_KEYS) == 21


def test_config_values_and_errors():
    run = parse_config_text("# ablation\ngpc_m = 3\npreset = toy  # small\ntrain_sizes = 64, 96\n")
    assert run.gpc_m == 3 and run.model_config().gpc.m == 3 and run.train_sizes == (64, 96)
    with pytest.raises(ConfigError, match="foo"):
        parse_config_text("foo = 1")
    with pytest.raises(ConfigError):
        parse_config_text("lr = fast")
    with pytest.raises(ConfigError):
        parse_config_text("infer_size = 100")
    with pytest.raises(ConfigError):
        parse_config_text("supervision_setting = q")
    with pytest.raises(ConfigError):
        parse_config_text("just words")
