import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import lattices, make_random_lattice
from ltlm.checkpoint import load_checkpoint, save_checkpoint
from ltlm.errors import DataError, DuplicateUtteranceId, LatticeSyntaxError, ReservedIdViolation, UnknownSymbol
from ltlm.lattice import Arc, Lattice, SymbolTable
from ltlm.lattice_io import (
    LatticeArchive,
    lattice_to_text,
    parse_lattice_text,
    read_symbol_table,
    read_table,
    write_lattice_text,
    write_symbol_table,
    write_table,
)


def dump(lats, symbols=None):
    buf = io.StringIO()
    write_lattice_text(lats, buf, symbols)
    return buf.getvalue()


class TestParse:
    def test_single_record(self):
        table = SymbolTable(["a"])
        arch = parse_lattice_text("utt1\n0 1 a 0.5 1.25\n1 0.0\n\n", table)
        lat = arch["utt1"]
        assert lat.arcs == (Arc(0, 1, 4, 0.5, 1.25),)
        assert lat.final_states == {1: 0.0}

    def test_empty_stream(self):
        assert len(parse_lattice_text("")) == 0

    def test_unknown_symbol_strict(self):
        with pytest.raises(UnknownSymbol) as exc:
            parse_lattice_text("u\n0 1 zzz 0.1 0.1\n1 0\n", SymbolTable(["a"]))
        assert exc.value.line == 2

    def test_unknown_symbol_lenient(self):
        arch = parse_lattice_text("u\n0 1 zzz 0.1 0.1\n1 0\n", SymbolTable(["a"]), strict=False)
        assert arch["u"].arcs[0].word == 3

    def test_duplicate_utterance(self):
        with pytest.raises(DuplicateUtteranceId):
            parse_lattice_text("u\n0 0\n\nu\n0 0\n")

    @pytest.mark.parametrize("text", ["u\n0 1 4 x 0\n1 0\n", "u\n0 1 4 0\n", "u\n0 1 4 nan 0\n1 0\n", "u\n0 1 4 0 0\n"])
    def test_malformed_lines(self, text):
        with pytest.raises(DataError):
            parse_lattice_text(text)


class TestWrite:
    def test_cost_formatting(self):
        lat = Lattice("u", 2, (Arc(0, 1, 4, 0.1, 0.0),), 0, {1: 0.0})
        assert "0 1 4 0.1 0.0\n" in lattice_to_text(lat)

    def test_three_records_in_order(self):
        lats = [Lattice(f"u{i}", 2, (Arc(0, 1, 4, 0, 0),), 0, {1: 0.0}) for i in (2, 0, 1)]
        text = dump(lats)
        assert text.count("\n\n") == 3
        assert parse_lattice_text(text).ids() == ["u2", "u0", "u1"]

    def test_random_doubles_round_trip(self):
        rng = np.random.default_rng(5)
        vals = np.concatenate([rng.normal(0, 10, 5000), rng.uniform(0, 1e-5, 2500), rng.uniform(0, 1e6, 2500)])
        arcs = tuple(Arc(0, 1, 4, float(v), float(-v)) for v in vals)
        lat = Lattice("u", 2, arcs, 0, {1: 0.0})
        back = parse_lattice_text(dump([lat]))["u"]
        assert [a.lm_cost for a in back.arcs] == [float(v) for v in vals]

    def test_canonical_form_is_fixed_point(self, rng):
        lats = [make_random_lattice(rng, utt=f"u{i}") for i in range(20)]
        text = dump(lats)
        assert dump(parse_lattice_text(text)) == text

    @settings(max_examples=100, deadline=None)
    @given(lattices())
    def test_property_round_trip(self, lat):
        assert parse_lattice_text(dump([lat]))["h"] == lat


class TestSymbolTableIO:
    def test_minimal_table(self):
        t = read_symbol_table("<eps>\t0\n<s>\t1\n</s>\t2\n<unk>\t3\n")
        assert len(t) == 4

    def test_missing_unk(self):
        with pytest.raises(ReservedIdViolation):
            read_symbol_table("<eps>\t0\n<s>\t1\n</s>\t2\nfoo\t3\n")

    def test_large_table_round_trip(self):
        table = SymbolTable(f"w{i}" for i in range(200_000))
        buf = io.StringIO()
        write_symbol_table(table, buf)
        assert read_symbol_table(buf.getvalue()) == table

    def test_bad_line(self):
        with pytest.raises(LatticeSyntaxError):
            read_symbol_table("<eps> 0\n")


class TestTables:
    def test_round_trip(self):
        table = {"a": [1, 2, 3], "b": []}
        buf = io.StringIO()
        write_table(table, buf)
        assert read_table(buf.getvalue(), int) == table

    def test_duplicate(self):
        with pytest.raises(DuplicateUtteranceId):
            read_table("a\tx\na\ty\n")


class TestArchive:
    def test_lookup(self):
        lat = Lattice("x", 2, (Arc(0, 1, 4, 0, 0),), 0, {1: 0.0})
        arch = LatticeArchive([lat])
        assert "x" in arch and arch["x"] is lat and len(arch) == 1


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, rng):
        tensors = {"a": rng.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 1e-300]), "c": np.zeros((0, 2))}
        save_checkpoint(tmp_path / "x.ckpt", tensors, {"k": [1, 2]})
        back, meta = load_checkpoint(tmp_path / "x.ckpt")
        assert meta == {"k": [1, 2]}
        for k, v in tensors.items():
            assert back[k].shape == v.shape
            assert back[k].tobytes() == v.tobytes()

    def test_zero_dim_and_transposed(self, tmp_path):
        tensors = {"s": np.array(2.5), "t": np.arange(6.0).reshape(2, 3).T}
        save_checkpoint(tmp_path / "x.ckpt", tensors)
        back, _ = load_checkpoint(tmp_path / "x.ckpt")
        assert back["s"].shape == ()
        np.testing.assert_array_equal(back["t"], tensors["t"])

    def test_every_truncation_is_structured(self, tmp_path):
        save_checkpoint(tmp_path / "x.ckpt", {"a": np.ones(3)}, {"k": 1})
        raw = (tmp_path / "x.ckpt").read_bytes()
        for cut in range(len(raw)):
            (tmp_path / "y.ckpt").write_bytes(raw[:cut])
            with pytest.raises(DataError):
                load_checkpoint(tmp_path / "y.ckpt")

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"nope")
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "bad")

    def test_rejects_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "x.ckpt", {"a": np.ones(10)})
        raw = (tmp_path / "x.ckpt").read_bytes()
        (tmp_path / "x.ckpt").write_bytes(raw[:-16])
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_rejects_version(self, tmp_path):
        save_checkpoint(tmp_path / "x.ckpt", {"a": np.ones(1)})
        raw = bytearray((tmp_path / "x.ckpt").read_bytes())
        raw[8:12] = struct.pack("<I", 99)
        (tmp_path / "x.ckpt").write_bytes(bytes(raw))
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "x.ckpt")


class TestFuzz:
    @settings(max_examples=300, deadline=None)
    @given(st.text(alphabet="0123456789 .-e\tabu\n", max_size=80))
    def test_parser_only_raises_structured_errors(self, text):
        try:
            parse_lattice_text("u\n" + text)
        except DataError:
            pass
