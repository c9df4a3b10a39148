import numpy as np

from hdrfuse import tensorio


def test_save_load_bit_exact(tmp_path, rng):
    tensors = {
        "block/weight": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
        "block/bias": rng.normal(size=(4,)).astype(np.float32),
    }
    path = tmp_path / "weights.npz"
    tensorio.save_tensors(path, tensors)
    loaded = tensorio.load_tensors(path)
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == np.float32
        assert np.array_equal(loaded[name], tensors[name])
        assert loaded[name].tobytes() == tensors[name].tobytes()


def test_tensor_entries_coerced_to_float32(tmp_path):
    path = tmp_path / "weights.npz"
    tensorio.save_tensors(path, {"x": np.arange(4, dtype=np.float64)})
    assert tensorio.load_tensors(path)["x"].dtype == np.float32


def test_meta_entries_preserved(tmp_path):
    path = tmp_path / "ckpt.npz"
    payload = {"steps": 42, "nested": {"lr": 1e-5}}
    tensorio.save_tensors(
        path,
        {"meta/config": tensorio.pack_json(payload), "meta/step": np.array([7], dtype=np.int64)},
    )
    loaded = tensorio.load_tensors(path)
    assert tensorio.unpack_json(loaded["meta/config"]) == payload
    assert loaded["meta/step"].dtype == np.int64 and loaded["meta/step"][0] == 7
