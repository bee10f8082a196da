import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import special

from paircal.calibration import calibrate_study
from paircal.core import ArmRole, ClusterArm, CovariateSchema, Study, arm_mean_and_variance, validate_study
from paircal.errors import InputError, RankDeficient
from paircal.glm import CovType, LinkFunction, build_design, encode_covariates, fit, rescale_outcomes

from conftest import make_study


def _shift_outcomes(study, a, b):
    return study.map_arms(lambda arm: arm.with_outcomes(a * arm.outcomes + b))


def test_column_order_and_counts():
    study = make_study(np.random.default_rng(0), n_pairs=7, n_cont=4, categorical=True)
    design = build_design(study)
    assert design.n_cells == 14
    assert design.column_names[:4] == ("cell[1,control]", "cell[1,intervention]", "cell[2,control]",
                                      "cell[2,intervention]")
    assert design.column_names[14:] == ("x0", "x1", "x2", "x3", "grp[b]", "grp[c]")
    assert design.dropped_levels == {"grp": "a"}


def test_single_pair_without_covariates_has_two_columns():
    arms = [ClusterArm("9", r, [1.0, 2.0, 4.0]) for r in ("control", "intervention")]
    design = build_design(validate_study(Study.from_arms(arms)))
    assert design.matrix.shape == (6, 2)


def test_duplicate_covariate_is_rank_deficient():
    rng = np.random.default_rng(2)
    arms = []
    for role in ("control", "intervention"):
        x = rng.normal(size=(5, 1))
        arms.append(ClusterArm("1", role, rng.normal(size=5), np.hstack([x, x])))
    study = validate_study(Study.from_arms(arms, CovariateSchema(("a", "b"))))
    with pytest.raises(RankDeficient) as info:
        build_design(study)
    assert set(info.value.columns) == {"a", "b"}


def test_intercept_only_fit_matches_cell_means():
    study = make_study(np.random.default_rng(3), n_pairs=3)
    res = fit(build_design(study, include_covariates=False))
    for pair in study.pairs:
        for arm in pair.arms:
            j = res.design.cell_index(pair.pair_id, arm.role)
            mean, _ = arm_mean_and_variance(arm)
            e = arm.outcomes - mean
            assert res.theta[j] == pytest.approx(mean, abs=1e-12)
            assert res.covariance[j, j] == pytest.approx(np.sum(e**2) / arm.n_sampled**2, rel=1e-10)


def test_normal_equation_oracle_six_rows():
    y1, y2 = np.array([1.0, 3.0, 2.0]), np.array([4.0, 2.5, 5.0])
    x1, x2 = np.array([[0.5], [1.5], [-1.0]]), np.array([[2.0], [0.0], [1.0]])
    arms = [ClusterArm("1", "control", y1, x1), ClusterArm("1", "intervention", y2, x2)]
    study = validate_study(Study.from_arms(arms, CovariateSchema(("x",))))
    res = fit(build_design(study))
    # hand-built normal equations, independent of the design builder
    d = np.array([[1, 0, 0.5], [1, 0, 1.5], [1, 0, -1.0], [0, 1, 2.0], [0, 1, 0.0], [0, 1, 1.0]])
    y = np.r_[y1, y2]
    theta = np.linalg.solve(d.T @ d, d.T @ y)
    assert np.allclose(res.theta, theta, atol=1e-10, rtol=0)


def test_zero_coefficient_reduces_to_raw_means():
    study = make_study(np.random.default_rng(4), n_pairs=2)
    res = fit(build_design(study))
    zeroed = res.with_theta(np.r_[fit(build_design(study, include_covariates=False)).theta, 0.0, 0.0])
    est = calibrate_study(study, zeroed)
    for i, pair in enumerate(study.pairs):
        for role in ArmRole:
            assert est.mu[i, role - 1] == pytest.approx(arm_mean_and_variance(pair.arm(role))[0], abs=1e-12)


def test_weighted_fit_matches_weighted_normal_equations():
    rng = np.random.default_rng(5)
    study = make_study(rng, n_pairs=2)
    design = build_design(study)
    w = rng.uniform(0.5, 2.0, size=design.matrix.shape[0])
    res = fit(design, weights=w)
    x, y = design.matrix, design.outcomes
    theta = np.linalg.solve(x.T @ (x * w[:, None]), x.T @ (w * y))
    assert np.allclose(res.theta, theta, atol=1e-10)


def test_logit_fit_matches_score_equations():
    rng = np.random.default_rng(6)
    study = make_study(rng, n_pairs=3, slopes=[0.4, -0.2])
    study = study.map_arms(lambda a: a.with_outcomes(special.expit(a.outcomes / 3)))
    design = build_design(study)
    res = fit(design, link="logit")
    mu = special.expit(design.matrix @ res.theta)
    assert np.max(np.abs(design.matrix.T @ (design.outcomes - mu))) < 1e-8
    assert res.n_iter < 100


def test_logit_rejects_outcomes_outside_unit_interval():
    study = make_study(np.random.default_rng(7), n_pairs=2)
    with pytest.raises(InputError, match="strictly inside"):
        fit(build_design(study), link="logit")


def test_rescale_outcomes():
    assert np.allclose(rescale_outcomes(np.array([0.0, 50.0, 100.0]), 0, 100), [0, 0.5, 1])


def test_hc1_and_cluster_options():
    study = make_study(np.random.default_rng(8), n_pairs=3)
    design = build_design(study)
    hc0 = fit(design)
    hc1 = fit(design, cov_type="HC1")
    n, p = design.matrix.shape
    assert np.allclose(hc1.covariance, hc0.covariance * n / (n - p))
    clu = fit(design, cov_type=CovType.CLUSTER)
    assert np.allclose(clu.covariance, clu.covariance.T)


def test_arm_specific_slopes():
    study = make_study(np.random.default_rng(9), n_pairs=4, n_range=(10, 14))
    design = build_design(study, arm_specific_slopes=True)
    assert design.matrix.shape[1] == 8 + 4
    res = fit(design)
    assert res.slopes(ArmRole.CONTROL).shape == (2,)
    assert not np.allclose(res.slopes(ArmRole.CONTROL), res.slopes(ArmRole.INTERVENTION))


def test_categorical_encoding_reference_omitted():
    schema = CovariateSchema((), (("risk", ("low", "high")),))
    z, names = encode_covariates(schema, np.empty((3, 0)), np.array([["low"], ["high"], ["low"]], dtype=object))
    assert names == ["risk[high]"]
    assert z[:, 0].tolist() == [0.0, 1.0, 0.0]


def test_identity_link_inverse():
    eta = np.array([-1.0, 2.0])
    assert np.array_equal(LinkFunction.IDENTITY.inverse(eta), eta)
    assert np.allclose(LinkFunction.LOGIT.inverse_derivative(eta), special.expit(eta) * (1 - special.expit(eta)))


# properties ---------------------------------------------------------------

seeds = st.integers(0, 2**32 - 1)


@given(seeds, st.booleans())
def test_residuals_orthogonal_to_design(seed, categorical):
    study = make_study(np.random.default_rng(seed), n_pairs=3, categorical=categorical)
    design = build_design(study)
    res = fit(design)
    assert np.max(np.abs(design.matrix.T @ res.residuals)) < 1e-8 * np.linalg.norm(design.outcomes)


@given(seeds, st.booleans())
def test_covariance_symmetric_psd(seed, logit):
    study = make_study(np.random.default_rng(seed), n_pairs=3)
    if logit:
        study = study.map_arms(lambda a: a.with_outcomes(special.expit(a.outcomes / 4)))
    cov = fit(build_design(study), link="logit" if logit else "identity").covariance
    assert np.max(np.abs(cov - cov.T)) <= 1e-10 * max(1.0, np.max(np.abs(cov)))
    eig = np.linalg.eigvalsh(cov)
    assert eig.min() >= -1e-10 * eig.max()


@given(seeds)
def test_sandwich_invariant_to_row_order(seed):
    rng = np.random.default_rng(seed)
    study = make_study(rng, n_pairs=3)
    design = build_design(study)
    res = fit(design)
    perm = rng.permutation(design.matrix.shape[0])
    x, y = design.matrix[perm], design.outcomes[perm]
    # refit the permuted system through the same public routine
    shuffled = type(design)(x, y, design.weights[perm], design.column_names, design.cells,
                            design.row_cell[perm], design.schema)
    other = fit(shuffled)
    assert np.allclose(other.theta, res.theta, atol=1e-10)
    assert np.allclose(other.covariance, res.covariance, atol=1e-12, rtol=1e-9)


@given(seeds, st.floats(0.1, 10), st.floats(-100, 100))
def test_affine_outcome_transform(seed, a, b):
    study = make_study(np.random.default_rng(seed), n_pairs=3)
    base = fit(build_design(study))
    moved = fit(build_design(_shift_outcomes(study, a, b)))
    k = base.design.n_cells
    assert np.allclose(moved.theta[k:], a * base.theta[k:], atol=1e-8 * (1 + abs(b)))
    assert np.allclose(moved.theta[:k], a * base.theta[:k] + b, atol=1e-8 * (1 + abs(b)))
    assert np.allclose(moved.covariance, a * a * base.covariance, rtol=1e-7, atol=1e-9 * a * a)
