import numpy as np
import pytest
from scipy import stats

from pfnet import (
    DatasetError, PerturbSpec, evaluate_residual, generate_dataset, load_dataset, save_dataset,
    simplify_case,
)
from pfnet.dataset import (
    compute_norm, denormalize, normalize, perturb_case, scenario_rng, split_sizes,
    topology_fingerprint,
)
from pfnet.grid import BusKind
from pfnet.harness import graph_to_case

from conftest import two_bus


def test_perturb_ranges(case14):
    spec = PerturbSpec()
    zero_load = [i for i, b in enumerate(case14.buses) if b.p_demand == 0]
    assert zero_load
    for k in range(200):
        case = perturb_case(case14, spec, scenario_rng(0, k))
        for old, new in zip(case14.branches, case.branches):
            assert 0.8 * old.r <= new.r <= 1.2 * old.r
            assert 0.8 * old.x <= new.x <= 1.2 * old.x
        for g in case.gens:
            assert 1.0 <= g.vm_set <= 1.05
        for i in zero_load:
            assert case.buses[i].p_demand == 0.0
        assert case.gens[0].p_set == case14.gens[0].p_set  # slack generation left to the solve
        assert [b.kind for b in case.buses] == [b.kind for b in case14.buses]


def test_line_scale_marginal_is_uniform(case14):
    spec = PerturbSpec()
    z0 = np.array([(br.r, br.x) for br in case14.branches])
    live = z0 > 0  # transformer branches have r = 0
    scales = []
    for k in range(300):
        case = perturb_case(case14, spec, scenario_rng(3, k))
        z = np.array([(br.r, br.x) for br in case.branches])
        scales.append(z[live] / z0[live])
    scales = np.concatenate(scales)
    assert scales.size >= 10_000
    assert scales.min() >= 0.8 and scales.max() <= 1.2
    ks = stats.kstest(scales, stats.uniform(loc=0.8, scale=0.4).cdf).statistic
    assert ks < 0.02


def test_generator_p_spread(case14):
    spec = PerturbSpec()
    pv = [j for j, g in enumerate(case14.gens) if g.bus != case14.slack and g.p_set != 0]
    draws = np.array([[perturb_case(case14, spec, scenario_rng(5, k)).gens[j].p_set for j in pv]
                      for k in range(4000)])
    nominal = np.array([case14.gens[j].p_set for j in pv])
    np.testing.assert_allclose(draws.mean(0), nominal, rtol=0.02)
    np.testing.assert_allclose(draws.std(0), 0.1 * np.abs(nominal), rtol=0.05)


@pytest.mark.parametrize("count, expected", [(10, (5, 2, 3)), (2000, (1000, 400, 600)), (7, (4, 1, 2))])
def test_split_sizes(count, expected):
    assert split_sizes(count, (0.5, 0.2, 0.3)) == expected


def test_split_fractions_validated():
    with pytest.raises(ValueError):
        split_sizes(10, (0.5, 0.5, 0.5))


def test_small_dataset_splits(case14):
    ds = generate_dataset(case14, PerturbSpec(seed=1), 10)
    assert ds.splits == {"train": (0, 5), "val": (5, 7), "test": (7, 10)}


def test_seed_determinism_bitwise(case14):
    a = generate_dataset(case14, PerturbSpec(seed=11), 30)
    b = generate_dataset(case14, PerturbSpec(seed=11), 30)
    for name in ("x", "y", "edge_attr", "edges", "mask"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.norm == b.norm


def test_index_independent_of_count_and_workers(case14):
    a = generate_dataset(case14, PerturbSpec(seed=2), 12)
    b = generate_dataset(case14, PerturbSpec(seed=2), 6, workers=2)
    assert a.y[:6].tobytes() == b.y.tobytes()


def test_known_slots_equal_labels(small_ds):
    known = small_ds.mask == 0
    np.testing.assert_array_equal(small_ds.y[:, known], small_ds.x[:, known])
    assert np.all(small_ds.x[:, small_ds.mask == 1] == 0)


def test_labels_satisfy_physics(small_ds, case14):
    base = simplify_case(case14)
    for k in range(0, len(small_ds), 17):
        g = small_ds.graph(k)
        # rebuild the scenario's impedances from the sample itself
        case = graph_to_case(g)
        dp, dq = evaluate_residual(case, g.y[:, 0], g.y[:, 1], g.y[:, 2], g.y[:, 3])
        assert max(np.abs(dp).max(), np.abs(dq).max()) < 1e-6
    assert small_ds.n_nodes == base.n_bus


def test_norm_from_training_split_only(small_ds):
    lo, hi = small_ds.splits["train"]
    ref = compute_norm(small_ds.x[lo:hi], small_ds.mask, small_ds.edge_attr[lo:hi])
    assert ref == small_ds.norm
    x, _, e = small_ds.normalized_arrays()
    known = np.broadcast_to(small_ds.mask == 0, x[lo:hi].shape)
    for c in range(4):
        vals = x[lo:hi][..., c][known[..., c]]
        if np.ptp(small_ds.x[lo:hi][..., c][known[..., c]]) > 0:
            assert abs(vals.mean()) < 1e-6 and abs(vals.std() - 1) < 1e-6
    assert np.allclose(e[lo:hi].reshape(-1, 2).mean(0), 0, atol=1e-6)


def test_std_clamp_gives_zero_not_nan(small_ds):
    # theta is known only at the slack, where it is always 0
    assert small_ds.norm.std[1] == 1.0
    g = normalize(small_ds.graph(0), small_ds.norm)
    assert np.all(np.isfinite(g.x)) and g.x[small_ds.mask[:, 1] == 0, 1].tolist() == [0.0]


def test_normalize_inverse(small_ds):
    g = small_ds.graph(3)
    back = denormalize(normalize(g, small_ds.norm), small_ds.norm)
    np.testing.assert_allclose(back.y, g.y, atol=1e-12)
    np.testing.assert_allclose(back.edge_attr, g.edge_attr, atol=1e-12)
    np.testing.assert_allclose(back.x[g.mask == 0], g.x[g.mask == 0], atol=1e-12)
    assert np.all(normalize(g, small_ds.norm).x[g.mask == 1] == 0)


def test_save_load_round_trip(tmp_path, small_ds):
    path = tmp_path / "d.pfds"
    save_dataset(small_ds, path)
    back = load_dataset(path)
    for name in ("x", "y", "edge_attr", "edges", "mask"):
        assert getattr(back, name).tobytes() == getattr(small_ds, name).tobytes()
    assert back.norm == small_ds.norm and back.splits == small_ds.splits
    assert back.name == small_ds.name and back.base_mva == small_ds.base_mva
    raw = path.read_bytes()
    assert raw[:8] == b"PFNETDS\x00"


def test_load_rejects_garbage(tmp_path, small_ds):
    bad = tmp_path / "bad.pfds"
    bad.write_bytes(b"not a dataset at all, definitely not a dataset" * 4)
    with pytest.raises(DatasetError, match="not a dataset"):
        load_dataset(bad)
    path = tmp_path / "d.pfds"
    save_dataset(small_ds, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DatasetError, match="size mismatch"):
        load_dataset(path)


def test_resample_budget_exhausted():
    hopeless = two_bus(p=80.0, q=40.0)
    with pytest.raises(DatasetError, match="no convergent draw"):
        generate_dataset(hopeless, PerturbSpec(), 2)


def test_topology_fingerprint(small_ds, case118):
    assert small_ds.fingerprint == topology_fingerprint(small_ds.edges, small_ds.mask)
    other = small_ds.mask.copy()
    other[[0, 1]] = other[[1, 0]]
    assert topology_fingerprint(small_ds.edges, other) != small_ds.fingerprint


def test_perturb_spec_validation():
    with pytest.raises(ValueError):
        PerturbSpec(line_scale_lo=1.2, line_scale_hi=0.8)
    with pytest.raises(ValueError):
        PerturbSpec(load_sigma_frac=-0.1)


def test_slack_only_known_angle(small_ds):
    slack_rows = np.flatnonzero((small_ds.mask == (0, 0, 1, 1)).all(1))
    assert len(slack_rows) == 1
    assert int(BusKind.SLACK) == 3
