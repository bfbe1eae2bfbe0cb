"""Tests for the training objectives.

Oracles used here:
- exact degenerate cases (point-mass class posterior, forced-constant nets);
- an independently coded K=2 unrolling of the discrete class sum;
- Monte Carlo marginalization over sampled labels;
- prior-sampling estimates of the log evidence on d_z=1 models;
- central finite differences for every gradient path.
"""

import numpy as np
import pytest

from ssdgm import model as md
from ssdgm import objective as ob
from ssdgm.errors import UsageError
from ssdgm.nn_core import backward, finite_diff_gradient, named_rng


def tiny_model(mode="point", seed=0, d_z=2, hidden=(8,)):
    return md.build_model(2, d_z, 2, hidden, mode=mode, seed=seed)


def zero_store(store):
    for _, t in store.items():
        t.data = np.zeros_like(t.data)


def force_point_mass(m, label, gap=800.0):
    """Make q(y|x) an exact point mass: exp(-gap) underflows to zero."""
    zero_store(m.recog_y)
    m.recog_y["logits.b"].data[label] = gap


CFG = ob.ObjectiveConfig()


class TestLabeledElbo:
    def test_constant_likelihoods_and_prior_posterior(self):
        """Flat nets: log p(x|z) and log p(y|x,z) lose their z-dependence
        and q(z|x,y) equals the prior, so the bound is c1 + c2 - 0."""
        m = tiny_model()
        zero_store(m.decoder)
        zero_store(m.encoder)
        zero_store(m.classifier)
        x = np.array([0.3, -0.4])
        terms = ob.labeled_elbo(m, x, 0, CFG, named_rng(0, "noise"))
        c1 = md.gaussian_obs_logpdf(x, md.GaussianObservation(np.zeros(2), np.zeros(2)))
        c2 = np.log(0.5)
        np.testing.assert_allclose(terms.total, c1 + c2, rtol=1e-12)
        assert terms.kl_z == 0.0

    def test_kl_component_delegates(self):
        m = tiny_model(seed=5)
        x = np.array([0.7, 0.2])
        terms = ob.labeled_elbo(m, x, 1, CFG, named_rng(1, "noise"))
        dg = md.encode_z(m, x, np.array([0.0, 1.0]))
        np.testing.assert_allclose(terms.kl_z, md.kl_diag_gauss_std(dg), rtol=1e-12)

    def test_total_reconstructs_from_components(self):
        for seed in range(5):
            m = tiny_model(seed=seed)
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(3, 2))
            y = rng.integers(2, size=3)
            t = ob.labeled_elbo(m, x, y, CFG, named_rng(seed, "noise"))
            recon = t.recon_x + t.recon_y - t.kl_z + t.entropy_y - t.kl_w + t.alpha_term
            assert abs(t.total - recon) < 1e-10

    def test_bound_below_evidence_d_z_1(self):
        """On d_z=1 models the bound stays below a prior-sampling estimate
        of log p(x, y)."""
        hits = 0
        for seed in range(3):
            m = md.build_model(2, 1, 2, (8,), mode="point", seed=seed)
            rng = np.random.default_rng(seed + 50)
            x = rng.normal(size=2)
            y = int(rng.integers(2))
            elbo = ob.labeled_elbo(m, x, y, ob.ObjectiveConfig(mc_samples=256),
                                   named_rng(seed, "noise")).total
            if elbo <= log_evidence_d_z_1(m, x, y, n_samples=200000, seed=seed):
                hits += 1
        assert hits == 3

    def test_variance_shrinks_with_more_samples(self):
        """The bound estimate variance drops at least 8x from L=1 to L=16."""
        m = tiny_model(seed=3)
        x = np.tile(np.array([0.5, -0.25]), (10000, 1))
        y = np.zeros(10000, dtype=int)
        px1, py1, kl1 = ob.pointwise_labeled_terms(
            m, x, y, ob.ObjectiveConfig(mc_samples=1), named_rng(0, "var"))
        px16, py16, _ = ob.pointwise_labeled_terms(
            m, x, y, ob.ObjectiveConfig(mc_samples=16), named_rng(1, "var"))
        var1 = np.var(px1 + py1 - kl1)
        var16 = np.var(px16 + py16 - kl1)
        assert var16 < var1 / 8


def log_evidence_d_z_1(m, x, y, n_samples, seed):
    """log p(x, y) for a d_z=1 model by sampling the prior in chunks."""
    rng = named_rng(seed, "evidence")
    chunk = 50000
    log_terms = []
    remaining = n_samples
    while remaining > 0:
        k = min(chunk, remaining)
        remaining -= k
        z = rng.standard_normal((k, 1))
        mu, log_nu = md.node_decode(m, z)
        logpx = md.node_gaussian_obs_logpdf(np.tile(x, (k, 1)), mu, log_nu).data
        logits = md.node_classifier_logits(m, np.tile(x, (k, 1)), z).data
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logpy = (shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)))[:, y]
        log_terms.append(logpx + logpy)
    allt = np.concatenate(log_terms)
    m_ = allt.max()
    return float(m_ + np.log(np.exp(allt - m_).mean()))


class TestUnlabeledElbo:
    def test_point_mass_reduces_to_labeled(self):
        """An exact point-mass q(y|x) collapses the class sum bitwise."""
        for label in (0, 1):
            m = tiny_model(seed=7)
            force_point_mass(m, label)
            x = np.array([[0.2, 0.6], [-0.5, 0.1]])
            ul = ob.unlabeled_elbo(m, x, CFG, named_rng(2, "noise"))
            lab = ob.labeled_elbo(m, x, [label, label], CFG, named_rng(2, "noise"))
            assert ul.total == lab.total
            assert ul.entropy_y == 0.0

    def test_matches_hand_unrolled_two_class_sum(self):
        """Independent K=2 unroll: q0 L(x,0) + q1 L(x,1) + H, same noise."""
        for seed in range(10):
            m = tiny_model(seed=seed)
            rng = np.random.default_rng(seed + 20)
            x = rng.normal(size=(4, 2))
            ul = ob.unlabeled_elbo(m, x, CFG, named_rng(seed, "un"))

            q = np.stack([md.classify_q_y(m, xi).probs for xi in x])
            ent = sum(md.entropy_cat(md.classify_q_y(m, xi)) for xi in x)
            unrolled = ent
            for label in (0, 1):
                px, py, kl = ob.pointwise_labeled_terms(
                    m, x, np.full(4, label), CFG, named_rng(seed, "un"))
                unrolled += float(np.sum(q[:, label] * (px + py - kl)))
            np.testing.assert_allclose(ul.total, unrolled, atol=1e-10)

    def test_entropy_component_in_range(self):
        for seed in range(5):
            m = tiny_model(seed=seed)
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(6, 2))
            t = ob.unlabeled_elbo(m, x, CFG, named_rng(seed, "noise"))
            assert -1e-12 <= t.entropy_y <= 6 * np.log(2) + 1e-12

    def test_agrees_with_label_sampling_monte_carlo(self):
        """The explicit class sum equals the expectation of the label-sampled
        estimator; both sides estimated, compared at 3 combined SEs.

        Replicated rows with independent noise are iid draws of the
        single-point bound, so both estimators vectorize over one batch."""
        m = tiny_model(seed=11)
        x = np.array([0.4, -0.2])
        q = md.classify_q_y(m, x).probs
        h = md.entropy_cat(md.classify_q_y(m, x))

        n_expl = 20000
        xs = np.tile(x, (n_expl, 1))
        e = np.full(n_expl, h)
        for label in (0, 1):  # same seed: branches share noise, as in the op
            px, py, kl = ob.pointwise_labeled_terms(
                m, xs, np.full(n_expl, label), CFG, named_rng(0, "expl"))
            e += q[label] * (px + py - kl)
        explicit = e.mean()
        se_explicit = e.std(ddof=1) / np.sqrt(n_expl)

        rng = named_rng(99, "mc")
        n = 100000
        ys = rng.choice(2, size=n, p=q)
        t = np.empty(n)
        for label in (0, 1):
            idx = np.where(ys == label)[0]
            if idx.size == 0:
                continue
            px, py, kl = ob.pointwise_labeled_terms(
                m, np.tile(x, (idx.size, 1)), np.full(idx.size, label), CFG, rng)
            t[idx] = px + py - kl
        mc = t.mean() + h
        se_mc = t.std(ddof=1) / np.sqrt(n)

        assert abs(explicit - mc) < 3 * np.hypot(se_mc, se_explicit)


class TestCombinedObjective:
    def test_labeled_only_equals_labeled_sum(self):
        m = tiny_model(seed=2)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 2))
        y = rng.integers(2, size=5)
        cfg = ob.ObjectiveConfig(alpha=0.0)
        comb = ob.combined_objective(m, (x, y), None, cfg, named_rng(4, "s"))
        lab = ob.labeled_elbo(m, x, y, cfg, named_rng(4, "s"))
        assert comb.total == lab.total

    def test_unlabeled_only_equals_unlabeled_sum(self):
        m = tiny_model(seed=2)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 2))
        cfg = ob.ObjectiveConfig(alpha=0.9)
        comb = ob.combined_objective(m, None, x, cfg, named_rng(4, "s"))
        ul = ob.unlabeled_elbo(m, x, cfg, named_rng(4, "s"))
        assert comb.total == ul.total
        assert comb.alpha_term == 0.0

    def test_alpha_term_closed_form(self):
        """One labeled point with q(y|x) = [0.75, 0.25], y=0, alpha=0.6."""
        m = tiny_model()
        zero_store(m.recog_y)
        m.recog_y["logits.b"].data = np.array([np.log(3.0), 0.0])
        cfg = ob.ObjectiveConfig(alpha=0.6)
        comb = ob.combined_objective(m, (np.array([0.1, 0.1]), 0), None,
                                     cfg, named_rng(0, "s"))
        np.testing.assert_allclose(comb.alpha_term, 0.6 * np.log(0.75), rtol=1e-12)
        np.testing.assert_allclose(comb.alpha_term, -0.1726, atol=5e-5)

    def test_alpha_uses_batch_mean(self):
        """Duplicating the labeled batch leaves the alpha term unchanged."""
        m = tiny_model(seed=9)
        x = np.array([[0.3, 0.1], [-0.2, 0.4]])
        y = np.array([0, 1])
        cfg = ob.ObjectiveConfig(alpha=2.0)
        single = ob.combined_objective(m, (x, y), None, cfg, named_rng(1, "s"))
        doubled = ob.combined_objective(m, (np.tile(x, (2, 1)), np.tile(y, 2)),
                                        None, cfg, named_rng(1, "s"))
        np.testing.assert_allclose(doubled.alpha_term, single.alpha_term,
                                   rtol=1e-12)

    def test_both_empty_rejected(self):
        m = tiny_model()
        with pytest.raises(UsageError):
            ob.combined_objective(m, None, None, CFG, named_rng(0, "s"))
        with pytest.raises(UsageError):
            ob.combined_objective(m, (np.zeros((0, 2)), np.zeros(0, dtype=int)),
                                  np.zeros((0, 2)), CFG, named_rng(0, "s"))

    def test_bayes_mode_charges_weight_kl_once(self):
        m = tiny_model(mode="bayes", seed=4)
        x_l = np.array([[0.5, 0.5]])
        x_u = np.array([[0.1, -0.1], [0.2, 0.3]])
        cfg = ob.ObjectiveConfig(alpha=0.0, kl_w_scale=0.25)
        comb = ob.combined_objective(m, (x_l, [0]), x_u, cfg, named_rng(3, "s"))
        np.testing.assert_allclose(
            comb.kl_w, 0.25 * md.kl_weight_posterior(m.weight_posterior),
            rtol=1e-12)
        recon = (comb.recon_x + comb.recon_y - comb.kl_z + comb.entropy_y
                 - comb.kl_w + comb.alpha_term)
        assert abs(comb.total - recon) < 1e-10


class TestBayesianBounds:
    def test_tight_posterior_matches_point_model(self):
        """Weight posterior pinned at the point weights reproduces the point
        model's likelihood terms to within the clamp-floor jitter."""
        mp = tiny_model(mode="point", seed=6)
        mb = tiny_model(mode="bayes", seed=6)
        for name in mb.weight_posterior.shapes:
            mb.weight_posterior.params[f"{name}.log_std"].data[:] = -20.0
        x = np.array([[0.4, 0.2], [0.0, -0.3]])
        y = [0, 1]
        w = md.sample_weights(mb.weight_posterior, named_rng(5, "w"))
        bt = ob.bayesian_labeled_elbo(mb, x, y, w, CFG, named_rng(8, "noise"))
        pt = ob.labeled_elbo(mp, x, y, CFG, named_rng(8, "noise"))
        # each weight entry deviates < 0.01 at the clamp floor; the label
        # likelihood is O(1)-Lipschitz in those entries here
        assert abs(bt.recon_y - pt.recon_y) < 1e-2
        assert abs(bt.recon_x - pt.recon_x) < 1e-12  # decoder path identical

    def test_kl_w_component_delegates(self):
        m = tiny_model(mode="bayes", seed=1)
        cfg = ob.ObjectiveConfig(kl_w_scale=0.01)
        w = md.sample_weights(m.weight_posterior, named_rng(0, "w"))
        t = ob.bayesian_labeled_elbo(m, np.array([0.1, 0.2]), 1, w, cfg,
                                     named_rng(0, "noise"))
        np.testing.assert_allclose(
            t.kl_w, 0.01 * md.kl_weight_posterior(m.weight_posterior), rtol=1e-12)

    def test_standard_normal_posterior_zero_kl(self):
        m = tiny_model(mode="bayes", seed=1)
        wp = m.weight_posterior
        for name in wp.shapes:
            wp.params[f"{name}.mu"].data[:] = 0.0
            wp.params[f"{name}.log_std"].data[:] = 0.0
        w = md.sample_weights(wp, named_rng(0, "w"))
        t = ob.bayesian_labeled_elbo(m, np.array([0.1, 0.2]), 0, w, CFG,
                                     named_rng(0, "noise"))
        assert t.kl_w == 0.0

    def test_point_mass_unlabeled_reduces_to_labeled_likelihood(self):
        """With a point-mass q(y|x) the Bayesian unlabeled bound equals the
        Bayesian labeled bound without its weight-KL bookkeeping."""
        m = tiny_model(mode="bayes", seed=8)
        force_point_mass(m, 1)
        x = np.array([[0.3, -0.6]])
        w = md.sample_weights(m.weight_posterior, named_rng(2, "w"))
        ul = ob.bayesian_unlabeled_elbo(m, x, w, CFG, named_rng(6, "noise"))
        lab = ob.bayesian_labeled_elbo(m, x, [1], w, CFG, named_rng(6, "noise"))
        np.testing.assert_allclose(ul.total, lab.total + lab.kl_w, rtol=1e-12)
        assert ul.kl_w == 0.0

    def test_unlabeled_hand_unrolled_sum(self):
        for seed in range(5):
            m = tiny_model(mode="bayes", seed=seed)
            rng = np.random.default_rng(seed + 40)
            x = rng.normal(size=(3, 2))
            w = md.sample_weights(m.weight_posterior, named_rng(seed, "w"))
            ul = ob.bayesian_unlabeled_elbo(m, x, w, CFG, named_rng(seed, "un"))

            q = np.stack([md.classify_q_y(m, xi).probs for xi in x])
            unrolled = sum(md.entropy_cat(md.classify_q_y(m, xi)) for xi in x)
            for label in (0, 1):
                px, py, kl = ob.pointwise_labeled_terms(
                    m, x, np.full(3, label), CFG, named_rng(seed, "un"), weights=w)
                unrolled += float(np.sum(q[:, label] * (px + py - kl)))
            np.testing.assert_allclose(ul.total, unrolled, atol=1e-10)

    def test_entropy_ignores_weight_sample(self):
        m = tiny_model(mode="bayes", seed=3)
        x = np.array([[0.2, 0.2], [0.6, -0.1]])
        w1 = md.sample_weights(m.weight_posterior, named_rng(1, "w"))
        w2 = md.sample_weights(m.weight_posterior, named_rng(2, "w"))
        t1 = ob.bayesian_unlabeled_elbo(m, x, w1, CFG, named_rng(0, "noise"))
        t2 = ob.bayesian_unlabeled_elbo(m, x, w2, CFG, named_rng(0, "noise"))
        assert t1.entropy_y == t2.entropy_y

    def test_point_mode_model_rejected(self):
        m = tiny_model(mode="point")
        with pytest.raises(UsageError):
            ob.bayesian_labeled_elbo(m, np.zeros(2), 0, None, CFG,
                                     named_rng(0, "s"))


class TestBaselineCrossEntropy:
    def test_uniform_prediction_is_minus_log2(self):
        bl = md.build_baseline(2, 2, (8,), seed=0)
        zero_store(bl.params)
        t = ob.baseline_cross_entropy(bl, np.array([[1.0, 2.0]]), [0])
        np.testing.assert_allclose(t.total, -np.log(2), rtol=1e-12)

    def test_empty_batch_rejected(self):
        bl = md.build_baseline(2, 2, (8,), seed=0)
        with pytest.raises(UsageError):
            ob.baseline_cross_entropy(bl, np.zeros((0, 2)), np.zeros(0, dtype=int))


def max_rel_error(grads, fd, names):
    worst = 0.0
    for name in names:
        denom = np.maximum(np.abs(fd[name]), 1e-6)
        worst = max(worst, float(np.max(np.abs(grads[name] - fd[name]) / denom)))
    return worst


class TestGradients:
    """Finite-difference checks with frozen noise for every objective."""

    def check(self, build, evaluate, seeds=3):
        for seed in range(seeds):
            model, params = build(seed)

            def loss_fn(_):
                return evaluate(model, seed).total

            terms = evaluate(model, seed)
            grads = backward(terms.node, params)
            fd = finite_diff_gradient(loss_fn, params)
            assert max_rel_error(grads, fd, params.names()) < 1e-4, seed

    def test_labeled(self):
        x = np.array([[0.5, -0.2], [0.1, 0.3]])
        y = [0, 1]

        def build(seed):
            m = tiny_model(seed=seed)
            return m, m.trainable_params()

        self.check(build, lambda m, s: ob.labeled_elbo(
            m, x, y, CFG, named_rng(s, "noise")))

    def test_unlabeled(self):
        x = np.array([[0.5, -0.2], [0.1, 0.3]])

        def build(seed):
            m = tiny_model(seed=seed)
            return m, m.trainable_params()

        self.check(build, lambda m, s: ob.unlabeled_elbo(
            m, x, CFG, named_rng(s, "noise")))

    def test_bayesian_labeled(self):
        x = np.array([[0.5, -0.2]])

        def build(seed):
            m = tiny_model(mode="bayes", seed=seed)
            return m, m.trainable_params()

        def evaluate(m, s):
            w = md.sample_weights(m.weight_posterior, named_rng(s, "w"))
            return ob.bayesian_labeled_elbo(
                m, x, [1], w, ob.ObjectiveConfig(kl_w_scale=0.1),
                named_rng(s, "noise"))

        self.check(build, evaluate)

    def test_bayesian_unlabeled(self):
        x = np.array([[0.5, -0.2]])

        def build(seed):
            m = tiny_model(mode="bayes", seed=seed)
            return m, m.trainable_params()

        def evaluate(m, s):
            w = md.sample_weights(m.weight_posterior, named_rng(s, "w"))
            return ob.bayesian_unlabeled_elbo(m, x, w, CFG, named_rng(s, "noise"))

        self.check(build, evaluate)

    def test_combined(self):
        x_l = np.array([[0.4, 0.1]])
        x_u = np.array([[0.0, 0.2], [-0.3, 0.5]])

        def build(seed):
            m = tiny_model(mode="bayes", seed=seed)
            return m, m.trainable_params()

        self.check(build, lambda m, s: ob.combined_objective(
            m, (x_l, [0]), x_u,
            ob.ObjectiveConfig(alpha=0.5, kl_w_scale=0.05), named_rng(s, "st")))

    def test_baseline(self):
        x = np.array([[0.4, 0.1], [0.2, -0.6]])
        y = [0, 1]

        def build(seed):
            bl = md.build_baseline(2, 2, (8,), seed=seed)
            return bl, bl.trainable_params()

        self.check(build, lambda b, s: ob.baseline_cross_entropy(b, x, y))
