import json

import numpy as np
import pytest

from layerprobe.bank import (BankError, BankManifest, EmbeddingBank, LayerSpec, SynthSpec, class_prototypes,
                             read_bank, synth_arrays, synth_bank, validate_bank, write_bank)

from conftest import make_spec


def _manifest(layers, n=2, task="single_label", c=3):
    return BankManifest(num_samples=n, layers=tuple(layers), task=task, num_classes=c)


def _tree_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


class TestLayout:
    def test_layer_file_size(self, tmp_path, rng):
        m = _manifest([LayerSpec("enc", "sequence", (4, 8))])
        write_bank(m, [rng.standard_normal((2, 4, 8))], np.array([0, 1]), tmp_path)
        assert (tmp_path / "layer_0.bin").stat().st_size == 256

    def test_single_label_file_size(self, tmp_path, rng):
        m = _manifest([LayerSpec("enc", "sequence", (2, 2))], n=3)
        write_bank(m, [rng.standard_normal((3, 2, 2))], np.array([0, 1, 2]), tmp_path)
        assert (tmp_path / "labels.bin").stat().st_size == 12

    def test_multi_label_file_size(self, tmp_path, rng):
        m = _manifest([LayerSpec("enc", "sequence", (2, 2))], n=3, task="multi_label", c=5)
        labels = np.zeros((3, 5), dtype=int)
        labels[:, 1] = 1
        write_bank(m, [rng.standard_normal((3, 2, 2))], labels, tmp_path)
        assert (tmp_path / "labels.bin").stat().st_size == 15

    def test_manifest_fields(self, tmp_path, rng):
        m = _manifest([LayerSpec("enc", "conv", (2, 3, 4))])
        write_bank(m, [rng.standard_normal((2, 2, 3, 4))], np.array([0, 2]), tmp_path)
        doc = json.loads((tmp_path / "manifest.json").read_text())
        assert doc == {"version": 1, "num_samples": 2, "task": "single_label", "num_classes": 3, "dtype": "f32le",
                       "layers": [{"name": "enc", "kind": "conv", "shape": [2, 3, 4]}]}

    def test_payload_is_little_endian_row_major(self, tmp_path):
        x = np.arange(2 * 2 * 3, dtype=np.float64).reshape(2, 2, 3)
        write_bank(_manifest([LayerSpec("enc", "sequence", (2, 3))]), [x], np.array([0, 1]), tmp_path)
        raw = (tmp_path / "layer_0.bin").read_bytes()
        np.testing.assert_array_equal(np.frombuffer(raw, dtype="<f4"), np.arange(12))

    def test_roundtrip_bit_exact(self, tmp_path, rng):
        layers = [LayerSpec("a", "sequence", (3, 5)), LayerSpec("b", "conv", (2, 2, 3))]
        tensors = [rng.standard_normal((4, 3, 5)), rng.standard_normal((4, 2, 2, 3))]
        labels = np.array([2, 0, 1, 1])
        write_bank(_manifest(layers, n=4), tensors, labels, tmp_path)
        bank = read_bank(tmp_path)
        for l, t in enumerate(tensors):
            stored = t.astype("<f4")
            assert bank.layer(l).astype("<f4").tobytes() == stored.tobytes()
            assert bank.get(3, l).dtype == np.float64
        np.testing.assert_array_equal(bank.labels, labels)

    def test_get_last_layer_shape(self, small_bank):
        bank = read_bank(small_bank)
        assert bank.get(0, bank.num_layers - 1).shape == bank.manifest.layers[-1].shape

    def test_write_rejects_shape_mismatch(self, tmp_path, rng):
        with pytest.raises(ValueError, match="shape"):
            write_bank(_manifest([LayerSpec("a", "sequence", (3, 5))]), [rng.standard_normal((2, 3, 4))],
                       np.array([0, 1]), tmp_path)

    def test_write_rejects_nan(self, tmp_path):
        x = np.zeros((2, 3, 5))
        x[1, 2, 3] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            write_bank(_manifest([LayerSpec("a", "sequence", (3, 5))]), [x], np.array([0, 1]), tmp_path)


class TestReadErrors:
    def test_truncated_layer(self, small_bank):
        f = small_bank / "layer_1.bin"
        f.write_bytes(f.read_bytes()[:-4])
        with pytest.raises(BankError, match="layer_1.bin.*size mismatch"):
            read_bank(small_bank)

    def test_label_out_of_range(self, small_bank):
        raw = bytearray((small_bank / "labels.bin").read_bytes())
        raw[4:8] = (3).to_bytes(4, "little")  # C == 3
        (small_bank / "labels.bin").write_bytes(bytes(raw))
        with pytest.raises(BankError, match="out of range.*offset 4"):
            read_bank(small_bank)

    def test_nan_payload(self, small_bank):
        raw = bytearray((small_bank / "layer_0.bin").read_bytes())
        raw[40:44] = np.array([np.nan], dtype="<f4").tobytes()
        (small_bank / "layer_0.bin").write_bytes(bytes(raw))
        with pytest.raises(BankError, match="layer_0.bin: non-finite value at byte offset 40"):
            read_bank(small_bank)

    def test_missing_file(self, small_bank):
        (small_bank / "labels.bin").unlink()
        with pytest.raises(BankError, match="missing labels"):
            read_bank(small_bank)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(BankError, match="missing manifest"):
            read_bank(tmp_path)


class TestValidate:
    def test_fresh_bank_is_clean(self, small_bank):
        assert validate_bank(small_bank) == []

    def test_appended_label_byte(self, small_bank):
        with open(small_bank / "labels.bin", "ab") as fh:
            fh.write(b"\x00")
        problems = validate_bank(small_bank)
        assert len(problems) == 1 and "size mismatch" in problems[0]

    def test_nan_reported_with_offset(self, small_bank):
        raw = bytearray((small_bank / "layer_0.bin").read_bytes())
        raw[8:12] = np.array([np.inf], dtype="<f4").tobytes()
        (small_bank / "layer_0.bin").write_bytes(bytes(raw))
        problems = validate_bank(small_bank)
        assert len(problems) == 1 and "offset 8" in problems[0]

    def test_multi_label_non_binary(self, tmp_path):
        synth_bank(make_spec(task="multi_label"), tmp_path)
        raw = bytearray((tmp_path / "labels.bin").read_bytes())
        raw[5] = 2
        (tmp_path / "labels.bin").write_bytes(bytes(raw))
        problems = validate_bank(tmp_path)
        assert len(problems) == 1 and "offset 5" in problems[0]


class TestSynth:
    def test_deterministic_bytes(self, tmp_path):
        synth_bank(make_spec(), tmp_path / "a")
        synth_bank(make_spec(), tmp_path / "b")
        assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")

    def test_zero_snr_is_noise_only(self):
        spec = make_spec(snr=0.0)
        noisy, _ = synth_arrays(spec)
        # same noise stream without any signal
        ref, _ = synth_arrays(make_spec(snr=0.0, informative_layer=0))
        for a, b in zip(noisy, ref):
            np.testing.assert_array_equal(a, b)

    def test_signal_only_inside_window(self):
        layers = (LayerSpec("x", "sequence", (16, 6)),)
        with_signal, _ = synth_arrays(make_spec(layers=layers, informative_layer=0, time_window=(2, 4), snr=5.0))
        without, _ = synth_arrays(make_spec(layers=layers, informative_layer=0, time_window=(2, 4), snr=0.0))
        diff = with_signal[0] - without[0]
        assert np.all(diff[:, :2] == 0) and np.all(diff[:, 4:] == 0)
        assert np.all(np.abs(diff[:, 2:4]).sum(axis=-1) > 0)

    def test_signal_is_scaled_unit_prototype(self):
        spec = make_spec(snr=5.0)
        sig, labels = synth_arrays(spec)
        noise, _ = synth_arrays(make_spec(snr=0.0))
        protos = class_prototypes(spec)
        np.testing.assert_allclose(np.linalg.norm(protos, axis=1), 1.0)
        diff = sig[1] - noise[1]
        np.testing.assert_allclose(diff, 5.0 * protos[labels][:, None, :] * np.ones((1, 8, 1)), atol=1e-12)
        np.testing.assert_array_equal(sig[0], noise[0])
        np.testing.assert_array_equal(sig[2], noise[2])

    def test_conv_window_on_width(self):
        layers = (LayerSpec("c", "conv", (2, 3, 10)),)
        spec = make_spec(layers=layers, informative_layer=0, time_window=(3, 5))
        sig, labels = synth_arrays(spec)
        noise, _ = synth_arrays(make_spec(layers=layers, informative_layer=0, time_window=(3, 5), snr=0.0))
        diff = sig[0] - noise[0]
        assert np.all(diff[..., :3] == 0) and np.all(diff[..., 5:] == 0)
        protos = class_prototypes(spec)
        # feature index = channel * height + row
        np.testing.assert_allclose(diff[0, 1, 2, 3], 5.0 * protos[labels[0], 1 * 3 + 2])

    def test_balanced_round_robin(self):
        _, labels = synth_arrays(make_spec(num_samples=10, num_classes=3))
        np.testing.assert_array_equal(labels, [0, 1, 2, 0, 1, 2, 0, 1, 2, 0])

    def test_multi_label_one_positive(self):
        _, labels = synth_arrays(make_spec(task="multi_label"))
        np.testing.assert_array_equal(labels.sum(axis=1), 1)

    def test_prototype_seed_shares_prototypes(self):
        a = make_spec(seed=1, prototype_seed=9)
        b = make_spec(seed=2, prototype_seed=9)
        np.testing.assert_array_equal(class_prototypes(a), class_prototypes(b))
        assert not np.array_equal(synth_arrays(a)[0][0], synth_arrays(b)[0][0])

    @pytest.mark.parametrize("field,value,match", [
        ("informative_layer", 3, "informative_layer"),
        ("time_window", (4, 20), "time_window"),
        ("time_window", (3, 3), "time_window"),
        ("snr", -1.0, "snr"),
        ("num_classes", 1, "num_classes"),
    ])
    def test_invalid_spec(self, field, value, match):
        with pytest.raises(ValueError, match=match):
            make_spec(**{field: value})

    def test_from_json_names_unknown_field(self):
        doc = {"layers": [{"name": "a", "kind": "sequence", "shape": [2, 2]}], "num_samples": 4, "num_classes": 2,
               "task": "single_label", "informative_layer": 0, "snr": 1.0, "seed": 0, "colour": "red"}
        with pytest.raises(ValueError, match="colour"):
            SynthSpec.from_json(doc)


def test_manifest_rejects_duplicate_names():
    with pytest.raises(ValueError, match="unique"):
        _manifest([LayerSpec("a", "sequence", (2, 2)), LayerSpec("a", "sequence", (2, 2))])


def test_layerspec_arity():
    with pytest.raises(ValueError):
        LayerSpec("a", "conv", (2, 2))
    with pytest.raises(ValueError):
        LayerSpec("a", "sequence", (0, 2))


def test_from_arrays_and_subset(rng):
    bank = EmbeddingBank.from_arrays([rng.standard_normal((5, 3, 2)), rng.standard_normal((5, 2, 2, 4))],
                                     np.array([0, 1, 0, 1, 1]))
    assert [s.kind for s in bank.manifest.layers] == ["sequence", "conv"]
    sub = bank.subset([4, 0])
    assert sub.num_samples == 2
    np.testing.assert_array_equal(sub.labels, [1, 0])
    np.testing.assert_array_equal(sub.get(1, 1), bank.get(0, 1))


def test_synth_spec_json_roundtrip():
    spec = make_spec(time_window=(2, 5), prototype_seed=4)
    assert SynthSpec.from_json(spec.to_json()) == spec
