import math
from collections import Counter

import pytest
from hypothesis import given, settings

from conftest import lattices, make_random_lattice, ref_paths
from ltlm.errors import AlreadyAugmented, CyclicLattice, NoFinalState, TooManyPaths
from ltlm.lattice import (
    BOS,
    EOS,
    Arc,
    Lattice,
    ScoreWeights,
    SymbolTable,
    arc_through_costs,
    augment,
    count_paths,
    enumerate_paths,
    prune,
    topo_sort,
    trim,
    validate,
)


def path_multiset(lat):
    return Counter((w, round(lm, 9), round(ac, 9)) for _, w, lm, ac in ref_paths(lat))


class TestSymbolTable:
    def test_reserved_ids(self):
        t = SymbolTable(["a"])
        assert [t.token(i) for i in range(4)] == ["<eps>", "<s>", "</s>", "<unk>"]
        assert t.id("a") == 4

    def test_unknown_maps_to_unk(self):
        assert SymbolTable(["a"]).ids(["a", "zzz"]) == [4, 3]


class TestValidate:
    def test_minimal_lattice_is_valid(self):
        lat = Lattice("u", 2, (Arc(0, 1, 4, 0.0, 0.0),), 0, {1: 0.0})
        assert validate(lat).ok

    def test_two_cycle_raises(self):
        lat = Lattice("u", 2, (Arc(0, 1, 4, 0, 0), Arc(1, 0, 4, 0, 0)), 0, {1: 0.0})
        with pytest.raises(CyclicLattice):
            validate(lat)

    def test_dangling_state_trimmed(self):
        lat = Lattice("u", 6, (Arc(0, 1, 4, 0, 0), Arc(1, 2, 5, 0, 0), Arc(2, 3, 4, 0, 0), Arc(3, 4, 4, 0, 0)), 0, {4: 0.0})
        res = validate(lat, trim=True)
        assert res.removed_states == 1
        assert res.lattice.num_states == 5
        assert not validate(lat).ok

    def test_no_final_state(self):
        with pytest.raises(NoFinalState):
            validate(Lattice("u", 2, (Arc(0, 1, 4, 0, 0),), 0, {}))


class TestTopoSort:
    def test_sorted_lattice_unchanged(self):
        lat = Lattice("u", 3, (Arc(0, 1, 4, 0.5, 1.0), Arc(1, 2, 5, 0.0, 2.0)), 0, {2: 0.0})
        assert topo_sort(lat) == lat

    def test_relabels_initial_state(self):
        lat = Lattice("u", 3, (Arc(2, 0, 4, 0, 0), Arc(0, 1, 5, 0, 0)), 2, {1: 0.0})
        out = topo_sort(lat)
        assert out.arcs == (Arc(0, 1, 4, 0, 0), Arc(1, 2, 5, 0, 0))
        assert out.initial_state == 0 and out.final_states == {2: 0.0}
        assert path_multiset(out) == path_multiset(lat)

    def test_random_dag_permuted(self, rng):
        for _ in range(20):
            lat = make_random_lattice(rng, max_states=20, max_paths=5000)
            perm = rng.permutation(lat.num_states)
            perm_lat = Lattice(
                "u", lat.num_states,
                tuple(Arc(int(perm[a.src]), int(perm[a.dst]), a.word, a.lm_cost, a.ac_cost) for a in lat.arcs),
                int(perm[0]), {int(perm[s]): c for s, c in lat.final_states.items()},
            )
            out = topo_sort(perm_lat)
            assert all(a.src < a.dst for a in out.arcs)
            assert path_multiset(out) == path_multiset(lat)

    @settings(max_examples=60, deadline=None)
    @given(lattices())
    def test_property_src_before_dst_and_paths_kept(self, lat):
        out = topo_sort(lat)
        assert all(a.src < a.dst for a in out.arcs)
        assert path_multiset(out) == path_multiset(lat)


class TestAugment:
    def test_single_arc(self):
        lat = Lattice("u", 2, (Arc(0, 1, 4, 0.0, 0.0),), 0, {1: 0.5})
        out = augment(lat)
        assert out.num_arcs == 3
        paths = ref_paths(out)
        assert len(paths) == 1 and paths[0][1] == (BOS, 4, EOS)
        eos = [a for a in out.arcs if a.word == EOS]
        assert eos[0].lm_cost == 0.5
        assert list(out.final_states.values()) == [0.0]

    def test_two_finals(self):
        lat = Lattice("u", 3, (Arc(0, 1, 4, 0, 0), Arc(1, 2, 5, 0, 0)), 0, {1: 0.1, 2: 0.2})
        words = Counter(a.word for a in augment(lat).arcs)
        assert words[EOS] == 2 and words[BOS] == 1

    def test_twice_raises(self):
        lat = augment(Lattice("u", 2, (Arc(0, 1, 4, 0, 0),), 0, {1: 0.0}))
        with pytest.raises(AlreadyAugmented):
            augment(lat)

    @settings(max_examples=60, deadline=None)
    @given(lattices())
    def test_property_paths_and_costs_preserved(self, lat):
        before = Counter((w, round(lm + ac, 6)) for _, w, lm, ac in ref_paths(lat))
        after = Counter((w[1:-1], round(lm + ac, 6)) for _, w, lm, ac in ref_paths(augment(lat)))
        assert before == after


class TestPrune:
    def diamond(self, c1, c2):
        return Lattice("u", 3, (Arc(0, 1, 4, c1, 0.0), Arc(0, 1, 5, c2, 0.0), Arc(1, 2, 6, 0.0, 0.0)), 0, {2: 0.0})

    def test_infinite_beam_is_trim(self):
        lat = self.diamond(10.0, 15.0)
        assert prune(lat, math.inf) == trim(lat)

    def test_worse_path_removed(self):
        out = prune(self.diamond(10.0, 15.0), 4.0)
        assert [p[1] for p in ref_paths(out)] == [(4, 6)]

    def test_random_through_costs(self, rng):
        w = ScoreWeights()
        for _ in range(30):
            lat = make_random_lattice(rng, max_states=9, max_paths=3000)
            paths = ref_paths(lat)
            best = min(lm + ac for _, _, lm, ac in paths)
            # brute-force best-through cost per arc
            through = [min((lm + ac for arcs, _, lm, ac in paths if i in arcs), default=math.inf) for i in range(lat.num_arcs)]
            got, got_best = arc_through_costs(lat, w)
            assert got_best == pytest.approx(best)
            for t, g in zip(through, got):
                assert g == pytest.approx(t)
            out = prune(lat, 4.0)
            survivors = ref_paths(out)
            for i in range(out.num_arcs):
                assert min(lm + ac for arcs, _, lm, ac in survivors if i in arcs) <= best + 4.0 + 1e-9
            assert min(lm + ac for _, _, lm, ac in survivors) == pytest.approx(best)

    @settings(max_examples=60, deadline=None)
    @given(lattices())
    def test_property_best_path_survives(self, lat):
        best = min(lm + ac for _, _, lm, ac in ref_paths(lat))
        out = prune(lat, 0.0)
        assert min(lm + ac for _, _, lm, ac in ref_paths(out)) == pytest.approx(best)


class TestEnumerate:
    def test_diamond(self):
        lat = Lattice("u", 4, (Arc(0, 1, 4, 0, 0), Arc(1, 3, 0, 0, 0), Arc(0, 2, 5, 0, 0), Arc(2, 3, 0, 0, 0)), 0, {3: 0.0})
        assert sorted(p[0] for p in enumerate_paths(lat)) == [(4, 0), (5, 0)]

    def test_chain(self):
        lat = Lattice("u", 5, tuple(Arc(i, i + 1, 4 + i, 0, 0) for i in range(4)), 0, {4: 0.0})
        assert len(enumerate_paths(lat)) == 1

    def test_stacked_diamonds_limit(self):
        arcs = []
        for k in range(10):
            arcs += [Arc(k, k + 1, 4, 0, 0), Arc(k, k + 1, 5, 0, 0)]
        lat = Lattice("u", 11, tuple(arcs), 0, {10: 0.0})
        assert count_paths(lat) == 1024
        with pytest.raises(TooManyPaths):
            enumerate_paths(lat, limit=100)

    @settings(max_examples=60, deadline=None)
    @given(lattices())
    def test_property_matches_reference(self, lat):
        mine = Counter((w, round(lm, 9), round(ac, 9)) for w, lm, ac in enumerate_paths(lat))
        assert mine == Counter((w, round(lm, 9), round(ac, 9)) for _, w, lm, ac in ref_paths(lat))
        assert count_paths(lat) == len(ref_paths(lat))
