import json

import numpy as np
import pytest

from highwaylab.actors import Pattern
from highwaylab.allpairs import allpairs, verify_pair_coverage
from highwaylab.scenario_gen import (ConfigError, FreeFlowSpec, ParamSpace,
                                     SamplingExhausted, TargetedSpec,
                                     TruncatedNormalMixture, build_targeted,
                                     catalog, free_flow_space, load_split,
                                     realize, sample_free_flow,
                                     sample_targeted, split_free_flow,
                                     split_targeted, split_to_files)
from highwaylab.simulator import Intention, reset, step
from highwaylab.traj_sampler import DESK_SAMPLER, sample_trajectories


class TestAllPairs:
    def test_single_param(self):
        assert allpairs([5]) == [(v,) for v in range(5)]

    def test_three_binary_exactly_four(self):
        rows = allpairs([2, 2, 2])
        assert len(rows) == 4
        assert verify_pair_coverage([2, 2, 2], rows)

    def test_four_by_three(self):
        rows = allpairs([3, 3, 3, 3])
        assert len(rows) >= 9
        assert verify_pair_coverage([3, 3, 3, 3], rows)

    def test_mixed_levels(self):
        counts = [2, 4, 3, 2, 3]
        rows = allpairs(counts)
        assert verify_pair_coverage(counts, rows)
        # a broken set must fail the oracle
        assert not verify_pair_coverage(counts, rows[:-2])

    def test_deterministic(self):
        assert allpairs([3, 3, 4]) == allpairs([3, 3, 4])


class TestDistributions:
    def test_degenerate_sigma(self):
        mix = TruncatedNormalMixture(((1.0, 5.0, 0.0),), 0.0, 10.0)
        rng = np.random.default_rng(0)
        assert all(mix.sample(rng) == 5.0 for _ in range(20))

    def test_truncation_bounds(self):
        mix = TruncatedNormalMixture(((0.5, 2.0, 3.0), (0.5, 8.0, 3.0)), 1.0, 9.0)
        rng = np.random.default_rng(1)
        xs = [mix.sample(rng) for _ in range(2000)]
        assert min(xs) >= 1.0 and max(xs) <= 9.0

    def test_mixture_weights_monte_carlo(self):
        mix = TruncatedNormalMixture(((0.3, -5.0, 0.5), (0.7, 5.0, 0.5)), -10.0, 10.0)
        rng = np.random.default_rng(2)
        xs = np.array([mix.sample(rng) for _ in range(10000)])
        frac_low = float(np.mean(xs < 0))
        assert abs(frac_low - 0.3) < 0.02

    def test_rejection_exhaustion(self):
        mix = TruncatedNormalMixture(((1.0, 100.0, 0.01),), 0.0, 1.0)
        with pytest.raises(ConfigError):
            mix.sample(np.random.default_rng(3))

    def test_param_space_validation(self):
        with pytest.raises(ConfigError):
            ParamSpace(discrete={}, continuous={"x": [(0.0, 2.0), (1.0, 3.0)]})


class TestCatalog:
    def test_24_entries(self):
        assert len(catalog()) == 24

    def test_intentions_and_patterns(self):
        intents = {Intention.LANE_FOLLOW, Intention.LANE_CHANGE, Intention.LANE_MERGE}
        patterns = set(Pattern)
        for e in catalog():
            assert e.intention in intents
            for tpl in e.actors:
                if tpl.pattern is not None:
                    assert tpl.pattern in patterns

    def test_categories_partition(self):
        cats = {"normal": 0, "negotiating": 0, "reacting": 0}
        for e in catalog():
            assert e.category in cats
            cats[e.category] += 1
        assert sum(cats.values()) == 24
        assert all(v > 0 for v in cats.values())

    def test_intention_counts(self):
        by_intent = {}
        for e in catalog():
            by_intent[e.intention] = by_intent.get(e.intention, 0) + 1
        assert by_intent[Intention.LANE_FOLLOW] == 6
        assert by_intent[Intention.LANE_CHANGE] == 9
        assert by_intent[Intention.LANE_MERGE] == 9


class TestTargetedSampling:
    def entry(self, key):
        return next(e for e in catalog() if e.key == key)

    def test_braking_entry_structure(self):
        e = self.entry("lf_lead_braking")
        spec = sample_targeted(e, np.random.default_rng(0), set(), seed=1)
        assert len(spec.actors) == 1
        assert spec.actors[0]["script"]["pattern"] == "braking"
        assert spec.intention == "lane_follow"

    def test_excluded_avoided(self):
        e = self.entry("lf_sandwich")
        space = e.space()
        rng = np.random.default_rng(4)
        forbidden = {space.sample_tuple(rng) for _ in range(20)}
        for i in range(50):
            spec = sample_targeted(e, rng, forbidden, seed=i)
            assert tuple(spec.bucket_tuple) not in forbidden

    def test_exhaustion(self):
        e = self.entry("lm_empty")
        space = e.space()
        all_tuples = set()
        counts = space.level_counts
        import itertools
        for tup in itertools.product(*[range(k) for k in counts]):
            all_tuples.add(tup)
        with pytest.raises(SamplingExhausted):
            sample_targeted(e, np.random.default_rng(0), all_tuples, seed=0)

    def test_every_type_realizes_and_resets(self):
        rng = np.random.default_rng(7)
        for e in catalog():
            spec = sample_targeted(e, rng, set(), seed=11)
            setup = realize(spec)
            world = reset(setup)
            trajs = sample_trajectories(world.ego, world.lane_map, world.route,
                                        DESK_SAMPLER)
            assert trajs, f"{e.key}: no feasible trajectories at reset"
            step(world, trajs[0], 3)


class TestFreeFlow:
    def test_sample_fields(self):
        types = free_flow_space()
        assert len(types) == 7
        rng = np.random.default_rng(0)
        spec = sample_free_flow(types, rng, seed=3)
        assert 1 <= spec.scenario_type <= 7
        cap = 1.5 * spec.speed_limit
        assert 0.0 <= spec.ego["v"] <= cap
        for a in spec.actors:
            assert 0.0 <= a["v"] <= cap

    def test_realize_and_reset(self):
        types = free_flow_space()
        rng = np.random.default_rng(1)
        for i in range(10):
            spec = sample_free_flow(types, rng, seed=100 + i, index=i)
            world = reset(realize(spec))
            assert world.ego.v == spec.ego["v"]


class TestSplits:
    def test_small_targeted_split_hygiene(self):
        split = split_targeted((48, 0, 247), root_seed=5)
        test_tuples = {(s.scenario_type, tuple(s.bucket_tuple)) for s in split.test}
        train_tuples = {(s.scenario_type, tuple(s.bucket_tuple)) for s in split.train}
        assert not (test_tuples & train_tuples)
        assert split.counts() == (48, 0, 247)

    def test_paper_sizes(self):
        split = split_targeted((783, 0, 256), root_seed=0)
        assert split.counts() == (783, 0, 256)
        test_tuples = {(s.scenario_type, tuple(s.bucket_tuple)) for s in split.test}
        train_tuples = {(s.scenario_type, tuple(s.bucket_tuple)) for s in split.train}
        assert not (test_tuples & train_tuples)

    def test_infeasible_test_size(self):
        with pytest.raises(ConfigError):
            split_targeted((10, 0, 20), root_seed=0)

    def test_empty_split(self):
        split = split_targeted((0, 0, 0), root_seed=0)
        assert split.counts() == (0, 0, 0)

    def test_free_flow_split_disjoint_seeds(self):
        split = split_free_flow((30, 0, 10), root_seed=2)
        seeds = [s.seed for s in split.train + split.test]
        assert len(set(seeds)) == len(seeds)
        assert split.counts() == (30, 0, 10)

    def test_files_deterministic(self, tmp_path):
        split = split_targeted((12, 0, 247), root_seed=9)
        d1 = tmp_path / "a"
        d2 = tmp_path / "b"
        split_to_files(split, d1, 9)
        split2 = split_targeted((12, 0, 247), root_seed=9)
        split_to_files(split2, d2, 9)
        files1 = sorted(p.name for p in d1.iterdir())
        files2 = sorted(p.name for p in d2.iterdir())
        assert files1 == files2
        for name in files1:
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_load_roundtrip(self, tmp_path):
        split = split_free_flow((5, 0, 3), root_seed=1)
        split_to_files(split, tmp_path / "ff", 1)
        loaded = load_split(tmp_path / "ff")
        assert loaded.counts() == (5, 0, 3)
        assert loaded.train[0].to_dict() == split.train[0].to_dict()
