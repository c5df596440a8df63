import hashlib
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibekit import CheckpointError, Checkpoint, ContractError, RelayViolationError, Rng, ShapeError, Tensor
from vibekit.checkpoint import header_json, load, read_header, save
from vibekit.relay_lora import (
    LoRAAdapter,
    adapters_from_checkpoint,
    adapters_to_checkpoint,
    compose_inference,
    delta,
    init_adapter,
    merge,
    strip,
)


def example_adapter():
    # rank 1, alpha 2: delta = 2 * [[1],[2]] @ [[3,4]] = [[6,8],[12,16]]
    return LoRAAdapter("w", Tensor([[3.0, 4.0]]), Tensor([[1.0], [2.0]]), rank=1, alpha=2.0)


def random_checkpoint(seed, names=("w", "u"), shape=(4, 4)):
    rng = Rng(seed)
    return Checkpoint({n: rng.gaussian(shape) for n in names}, {"stage": "base"})


class TestDelta:
    def test_fresh_adapter_zero(self):
        ad = init_adapter("w", 4, 6, rank=2, alpha=2.0, rng=Rng(0))
        assert np.array_equal(delta(ad).numpy(), np.zeros((4, 6)))

    def test_hand_example(self):
        assert delta(example_adapter()).numpy().tolist() == [[6.0, 8.0], [12.0, 16.0]]

    def test_unit_scale_when_alpha_equals_rank(self):
        rng = Rng(1)
        a, b = rng.gaussian((2, 5)), rng.gaussian((3, 2))
        ad = LoRAAdapter("w", a, b, rank=2, alpha=2.0)
        assert np.allclose(delta(ad).numpy(), b.numpy() @ a.numpy(), atol=1e-15)

    def test_alpha_linearity(self):
        rng = Rng(2)
        a, b = rng.gaussian((2, 4)), rng.gaussian((4, 2))
        d1 = delta(LoRAAdapter("w", a, b, 2, 1.0))
        d2 = delta(LoRAAdapter("w", a, b, 2, 2.0))
        assert np.max(np.abs(d2.numpy() - 2.0 * d1.numpy())) < 1e-12

    def test_rank_bound(self):
        with pytest.raises(ContractError):
            LoRAAdapter("w", Tensor(Rng(0).gaussian_array((5, 3))),
                        Tensor(Rng(1).gaussian_array((4, 5))), rank=5, alpha=1.0)


class TestMergeStrip:
    def test_empty_set_identity(self):
        base = random_checkpoint(0)
        out = merge(base, [])
        assert out.metadata == base.metadata
        for n in base.names():
            assert np.array_equal(out.get(n).numpy(), base.get(n).numpy())

    def test_zero_base_plus_example(self):
        base = Checkpoint({"w": Tensor(np.zeros((2, 2)))}, {})
        out = merge(base, [example_adapter()])
        assert out.get("w").numpy().tolist() == [[6.0, 8.0], [12.0, 16.0]]

    def test_additive_inverse(self):
        base = random_checkpoint(3)
        ad = init_adapter("w", 4, 4, 2, 4.0, Rng(5))
        ad = LoRAAdapter("w", ad.a, Tensor(Rng(6).gaussian_array((4, 2))), 2, 4.0)
        neg = LoRAAdapter("w", ad.a, Tensor(-ad.b.numpy()), 2, 4.0)
        out = merge(merge(base, [ad]), [neg])
        assert np.max(np.abs(out.get("w").numpy() - base.get("w").numpy())) < 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_strip_merge_round_trip_bit_identical(self, seed):
        base = random_checkpoint(seed)
        rng = Rng(seed, stream=50)
        ad = LoRAAdapter("w", rng.gaussian((2, 4)), rng.gaussian((4, 2)), 2, 3.0)
        back = strip(merge(base, [ad]), [ad])
        assert np.array_equal(back.get("w").numpy(), base.get("w").numpy())
        assert np.array_equal(back.get("u").numpy(), base.get("u").numpy())
        assert back.metadata == base.metadata

    def test_strip_from_wrong_base_leaves_residual(self):
        b1, b2 = random_checkpoint(8), random_checkpoint(9)
        rng = Rng(10)
        ad = LoRAAdapter("w", rng.gaussian((2, 4)), rng.gaussian((4, 2)), 2, 2.0)
        got = strip(merge(b1, [ad]), [ad], stage="base").get("w").numpy() - b2.get("w").numpy()
        want = b1.get("w").numpy() - b2.get("w").numpy()
        assert np.max(np.abs(got - want)) < 1e-12

    def test_missing_target(self):
        with pytest.raises(CheckpointError):
            merge(random_checkpoint(0), [LoRAAdapter("nope", Tensor(np.ones((1, 4))),
                                                     Tensor(np.ones((4, 1))), 1, 1.0)])

    def test_shape_mismatch(self):
        base = Checkpoint({"w": Tensor(np.zeros((3, 3)))}, {})
        with pytest.raises(ShapeError):
            merge(base, [example_adapter()])

    def test_untargeted_tensors_carried_bitwise(self):
        base = random_checkpoint(11)
        rng = Rng(12)
        ad = LoRAAdapter("w", rng.gaussian((2, 4)), rng.gaussian((4, 2)), 2, 2.0)
        out = merge(base, [ad])
        assert out.get("u").numpy() is base.get("u").numpy()


class TestComposeInference:
    def test_fresh_adapters_noop(self):
        base = random_checkpoint(20)
        ad = init_adapter("w", 4, 4, 2, 2.0, Rng(21))
        out = compose_inference(base, [ad])
        assert np.array_equal(out.get("w").numpy(), base.get("w").numpy())
        assert out.metadata["stage"] == "inference"

    def test_same_arithmetic_as_merge(self):
        base = Checkpoint({"w": Tensor(np.zeros((2, 2)))}, {})
        out = compose_inference(base, [example_adapter()])
        assert out.get("w").numpy().tolist() == [[6.0, 8.0], [12.0, 16.0]]

    def test_relay_violation_guard(self):
        base = random_checkpoint(22)
        rng = Rng(23)
        ad = LoRAAdapter("w", rng.gaussian((2, 4)), rng.gaussian((4, 2)), 2, 2.0)
        merged = merge(base, [ad], stage="stage1_merged")
        with pytest.raises(RelayViolationError, match="relay violation"):
            compose_inference(merged, [ad])


class TestAdapterSerialization:
    def test_round_trip_in_memory(self):
        rng = Rng(30)
        ads = [LoRAAdapter("blocks.0.attn.q", rng.gaussian((2, 4)), rng.gaussian((4, 2)), 2, 2.0),
               LoRAAdapter("blocks.0.ffn.0", rng.gaussian((2, 4)), rng.gaussian((8, 2)), 2, 2.0)]
        ckpt = adapters_to_checkpoint(ads, stage="stage2")
        assert set(ckpt.names()) == {
            "blocks.0.attn.q.lora_A", "blocks.0.attn.q.lora_B",
            "blocks.0.ffn.0.lora_A", "blocks.0.ffn.0.lora_B"}
        back = adapters_from_checkpoint(ckpt)
        assert {a.target_name for a in back} == {a.target_name for a in ads}

    def test_missing_metadata_rejected(self):
        ckpt = Checkpoint({"w.lora_A": Tensor(np.ones((1, 2))), "w.lora_B": Tensor(np.ones((2, 1)))}, {})
        with pytest.raises(CheckpointError):
            adapters_from_checkpoint(ckpt)


class TestVbcpFormat:
    def test_round_trip_exact_bytes(self, tmp_path):
        ckpt = random_checkpoint(40, names=("a", "b", "odd"), shape=(3, 5))
        p1 = tmp_path / "one.vbcp"
        p2 = tmp_path / "two.vbcp"
        save(ckpt, p1)
        save(load(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_f32_storage_rounding(self, tmp_path):
        value = 0.1  # not representable in f32
        ckpt = Checkpoint({"x": Tensor([value])}, {})
        path = tmp_path / "f32.vbcp"
        save(ckpt, path)
        got = load(path).get("x").item()
        assert got == float(np.float32(value))
        assert abs(got - value) / abs(value) < 1e-6

    def test_header_json_matches_read_header(self, tmp_path):
        ckpt = random_checkpoint(41)
        path = tmp_path / "h.vbcp"
        save(ckpt, path)
        assert read_header(path) == header_json(ckpt)

    def test_data_section_aligned(self, tmp_path):
        ckpt = random_checkpoint(42)
        path = tmp_path / "a.vbcp"
        save(ckpt, path)
        header_len = len(header_json(ckpt).encode())
        data_start = (16 + header_len + 7) // 8 * 8
        blob = path.read_bytes()
        first = np.frombuffer(blob, dtype="<f4", count=16, offset=data_start)
        assert np.array_equal(first.astype(np.float64).reshape(4, 4),
                              ckpt.get("w").numpy().astype(np.float32).astype(np.float64))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vbcp"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            load(path)

    def test_truncated_header(self, tmp_path):
        good = tmp_path / "good.vbcp"
        save(random_checkpoint(45), good)
        clipped = tmp_path / "clipped.vbcp"
        clipped.write_bytes(good.read_bytes()[:20])
        with pytest.raises(CheckpointError):
            read_header(clipped)
        with pytest.raises(CheckpointError):
            load(clipped)

    def test_unsupported_version(self, tmp_path):
        good = tmp_path / "good.vbcp"
        save(random_checkpoint(46), good)
        blob = bytearray(good.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        bad = tmp_path / "v99.vbcp"
        bad.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load(bad)

    def test_merge_strip_through_f32_storage(self, tmp_path):
        # staging through 32-bit files keeps the round trip within 1e-6 rel
        base = random_checkpoint(43)
        rng = Rng(44)
        ad = LoRAAdapter("w", rng.gaussian((2, 4)), rng.gaussian((4, 2)), 2, 2.0)
        p = tmp_path / "m.vbcp"
        save(merge(base, [ad]), p)
        back = strip(load(p), [ad])
        ref = base.get("w").numpy()
        rel = np.abs(back.get("w").numpy() - ref) / np.maximum(1.0, np.abs(ref))
        assert rel.max() < 1e-6

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_save_load_values_are_f32_exact(self, seed):
        ckpt = Checkpoint({"t": Rng(seed).gaussian((2, 3))}, {"k": "v"})
        import tempfile

        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "x.vbcp")
            save(ckpt, path)
            back = load(path)
        expected = ckpt.get("t").numpy().astype(np.float32).astype(np.float64)
        assert np.array_equal(back.get("t").numpy(), expected)
        assert back.metadata == {"k": "v"}


class TestAlgebraProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4), st.integers(4, 9), st.integers(4, 9),
           st.floats(0.5, 16.0))
    def test_merge_strip_round_trip_any_shape(self, seed, rank, d_out, d_in, alpha):
        rng = Rng(seed, stream=51)
        base = Checkpoint({"w": rng.gaussian((d_out, d_in))}, {"stage": "base"})
        ad = LoRAAdapter("w", rng.gaussian((rank, d_in)), rng.gaussian((d_out, rank)), rank, alpha)
        back = strip(merge(base, [ad]), [ad])
        assert np.array_equal(back.get("w").numpy(), base.get("w").numpy())
        assert back.metadata == base.metadata

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.5, 8.0))
    def test_delta_scales_linearly_in_alpha(self, seed, alpha):
        rng = Rng(seed, stream=52)
        a, b = rng.gaussian((2, 5)), rng.gaussian((4, 2))
        unit = delta(LoRAAdapter("w", a, b, 2, 1.0)).numpy()
        scaled = delta(LoRAAdapter("w", a, b, 2, alpha)).numpy()
        assert np.max(np.abs(scaled - alpha * unit)) < 1e-12 * max(1.0, alpha)


class TestVbcpProperties:
    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.text(alphabet="abcxyz._0123456789", min_size=1, max_size=12),
                    min_size=1, max_size=4, unique=True),
           st.integers(0, 10_000))
    def test_round_trip_any_names(self, names, seed):
        import tempfile

        rng = Rng(seed, stream=53)
        ckpt = Checkpoint({n: rng.gaussian((2, 3)) for n in names}, {"note": "x"})
        with tempfile.TemporaryDirectory() as d:
            p1, p2 = os.path.join(d, "a.vbcp"), os.path.join(d, "b.vbcp")
            save(ckpt, p1)
            save(load(p1), p2)
            with open(p1, "rb") as f1, open(p2, "rb") as f2:
                assert f1.read() == f2.read()


GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")


class TestGoldenFixture:
    def test_fixture_digest_stable(self):
        path = os.path.join(GOLDEN_DIR, "reference.vbcp")
        with open(path, "rb") as f:
            digest = hashlib.sha256(f.read()).hexdigest()
        with open(os.path.join(GOLDEN_DIR, "reference.sha256"), "r", encoding="utf-8") as f:
            assert digest == f.read().strip()

    def test_fixture_round_trips_bitwise(self, tmp_path):
        path = os.path.join(GOLDEN_DIR, "reference.vbcp")
        out = tmp_path / "copy.vbcp"
        save(load(path), out)
        with open(path, "rb") as f:
            assert out.read_bytes() == f.read()

    def test_fixture_contents(self):
        ckpt = load(os.path.join(GOLDEN_DIR, "reference.vbcp"))
        assert ckpt.get("layers.0.weight").numpy().tolist() == [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]
        assert ckpt.get("layers.0.bias").numpy().tolist() == [0.5, -0.25, 7.0]
        assert ckpt.metadata["stage"] == "golden"
