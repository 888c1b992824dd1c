"""Container format: round-trips, validation, rejection of malformed input."""

import numpy as np
import pytest

import archslim as a
from archslim.errors import (
    BadMagic,
    CorruptHeader,
    InvalidNetwork,
    IoFailure,
    NonFiniteWeight,
    VersionUnsupported,
)

from helpers import bn_tensor, chain_net, conv_tensor, linear_tensor, random_net


def assert_nets_equal(left, right):
    assert left.layers == right.layers
    assert left.metadata == right.metadata
    assert left.payload.tobytes() == right.payload.tobytes()


class TestBuildNetwork:
    def test_offsets_are_contiguous(self, rng):
        net = chain_net(rng)
        sizes = [rec.num_bytes for rec in net.layers]
        offsets = [rec.byte_offset for rec in net.layers]
        assert offsets[0] == 0
        for prev, size, off in zip(offsets, sizes, offsets[1:]):
            assert off == prev + size

    def test_duplicate_names_rejected(self, rng):
        t = conv_tensor("c", rng.normal(size=(2, 1, 3, 3)))
        with pytest.raises(InvalidNetwork, match="duplicate"):
            a.build_network([t, t])

    def test_non_f32_rejected(self):
        bad = a.LayerTensor("c", a.LayerKind.CONV2D, np.zeros((2, 1, 3, 3)))
        with pytest.raises(InvalidNetwork, match="float32"):
            a.build_network([bad])

    def test_nan_rejected_with_layer_name(self, rng):
        vals = rng.normal(size=(2, 1, 3, 3)).astype(np.float32)
        vals[1, 0, 2, 2] = np.nan
        with pytest.raises(NonFiniteWeight, match="'c'"):
            a.build_network([conv_tensor("c", vals)])

    def test_follows_must_point_backwards(self, rng):
        t1 = conv_tensor("c1", rng.normal(size=(2, 1, 3, 3)), follows="c2")
        t2 = conv_tensor("c2", rng.normal(size=(2, 2, 3, 3)))
        with pytest.raises(InvalidNetwork, match="earlier"):
            a.build_network([t1, t2])

    def test_rectangular_kernel_rejected(self, rng):
        bad = a.LayerTensor(
            "c", a.LayerKind.CONV2D, rng.normal(size=(2, 1, 3, 5)).astype(np.float32)
        )
        with pytest.raises(InvalidNetwork, match="square"):
            a.build_network([bad])

    def test_coupling_group_conv_only(self, rng):
        bad = a.LayerTensor(
            "fc",
            a.LayerKind.LINEAR,
            rng.normal(size=(4, 8)).astype(np.float32),
            coupling_group="g",
        )
        with pytest.raises(InvalidNetwork, match="coupling_group"):
            a.build_network([bad])

    def test_spatial_multiplier_linear_only(self, rng):
        bad = a.LayerTensor(
            "c",
            a.LayerKind.CONV2D,
            rng.normal(size=(2, 1, 3, 3)).astype(np.float32),
            spatial_multiplier=4,
        )
        with pytest.raises(InvalidNetwork, match="spatial_multiplier"):
            a.build_network([bad])


class TestRoundTrip:
    def test_file_round_trip(self, rng, tmp_path):
        net = random_net(rng)
        path = tmp_path / "net.nwf"
        a.write_weights(net, path)
        assert_nets_equal(a.read_weights(path), net)

    def test_zeros_round_trip(self, tmp_path):
        net = a.build_network(
            [conv_tensor("c", np.zeros((2, 1, 3, 3), np.float32))]
        )
        path = tmp_path / "z.nwf"
        a.write_weights(net, path)
        assert_nets_equal(a.read_weights(path), net)

    def test_f32_values_bit_exact(self, tmp_path):
        vals = np.array([[[[0.1]]], [[[np.float32(1) / 3]]]], np.float32)
        net = a.build_network([conv_tensor("c", vals)])
        path = tmp_path / "v.nwf"
        a.write_weights(net, path)
        back = a.read_weights(path).tensor("c")
        assert back.tobytes() == vals.tobytes()

    def test_metadata_and_edges_round_trip(self, rng):
        net = a.build_network(
            [
                conv_tensor("c1", rng.normal(size=(4, 3, 3, 3)), coupling_group="g"),
                bn_tensor("bn1", "c1", rng.normal(size=4)),
                conv_tensor(
                    "c2", rng.normal(size=(4, 4, 3, 3)), follows="c1",
                    coupling_group="g",
                ),
                linear_tensor("fc", "c2", rng.normal(size=(2, 16)), spatial_multiplier=4),
            ],
            metadata={"dataset": "toy", "pool_after:c2": "2"},
        )
        back = a.deserialize(a.serialize(net))
        assert_nets_equal(back, net)
        assert back.layer("fc").spatial_multiplier == 4
        assert back.layer("c2").coupling_group == "g"
        assert back.layer("bn1").follows == "c1"

    def test_serialization_is_canonical(self, rng):
        net = random_net(rng)
        assert a.serialize(net) == a.serialize(net)
        assert a.network_fingerprint(net).startswith("sha256:")

    def test_fingerprint_tracks_content(self, rng):
        net = chain_net(rng)
        vals = np.array(net.tensor("conv0"))
        vals[0, 0, 0, 0] += 1.0
        other = a.build_network(
            [conv_tensor("conv0", vals)]
            + [
                a.LayerTensor(r.name, r.kind, net.tensor(r.name), follows=r.follows)
                for r in net.layers[1:]
            ],
            metadata=net.metadata,
        )
        assert a.network_fingerprint(net) != a.network_fingerprint(other)


class TestRejection:
    def test_bad_magic(self, rng):
        data = b"XXXX" + a.serialize(chain_net(rng))[4:]
        with pytest.raises(BadMagic):
            a.deserialize(data)

    def test_bad_version(self, rng):
        import struct

        data = bytearray(a.serialize(chain_net(rng)))
        data[4:8] = struct.pack("<I", 2)
        with pytest.raises(VersionUnsupported):
            a.deserialize(bytes(data))

    def test_payload_one_float_short(self, rng):
        data = a.serialize(chain_net(rng))
        with pytest.raises(CorruptHeader):
            a.deserialize(data[:-4])

    def test_header_garbage(self, rng):
        data = bytearray(a.serialize(chain_net(rng)))
        data[20] = 0xFF
        with pytest.raises(CorruptHeader):
            a.deserialize(bytes(data))

    def test_non_finite_payload_rejected(self, rng):
        net = chain_net(rng)
        data = bytearray(a.serialize(net))
        nan = np.array([np.nan], "<f4").tobytes()
        data[-4:] = nan
        with pytest.raises(NonFiniteWeight):
            a.deserialize(bytes(data))

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoFailure):
            a.read_weights(tmp_path / "nope.nwf")

    def test_tensor_view_is_read_only(self, rng):
        net = chain_net(rng)
        view = net.tensor("conv0")
        with pytest.raises(ValueError):
            view[0, 0, 0, 0] = 1.0
