#!/usr/bin/env python3
"""
Acceptance checks for the vbtta package.

Runs at reduced scale by default; --full uses the sizes and seed counts the
checks are stated with. Results go to acceptance_results.json.
"""

import sys
import os
import json
import logging
import math
import tempfile
from datetime import datetime

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import click
import numpy as np
from scipy import special, stats

from vbtta.advi import FullRankGaussian, TransformSpec, advi_fit, posterior_mean_weights, vbtta_log_joint
from vbtta.augment import AugmentationSpec
from vbtta.benchcli import emit_report, gaussianity_study, run_experiment
from vbtta.config import load_config, with_overrides
from vbtta.mathstats import LOG_2PI, Rng, adaptive_quadrature
from vbtta.moments import NoiseConfig, delta_method_moments, mc_moments
from vbtta.optim import AdamConfig
from vbtta.vbcore import FitConfig, PriorConfig, ProbitComponent, fit_continuous, probit_class_probabilities

logger = logging.getLogger(__name__)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
RESULTS_FILE = "acceptance_results.json"


def mixture_problem(seed, weights, offsets, scales, n_instances=None, n_labels=2000):
    """
    Calibration labels drawn from a known mixture around per-instance component
    means. Returns (label sets, means (n, K), variances (n, K), true assignments).
    """
    gen = np.random.default_rng(seed)
    weights = np.asarray(weights, dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    scales = np.asarray(scales, dtype=float)
    n = n_instances or n_labels
    base = gen.normal(0.0, 2.0, size=n)
    means = base[:, None] + offsets[None, :]
    variances = np.tile(scales ** 2, (n, 1))
    per_instance = np.full(n, n_labels // n)
    per_instance[: n_labels - per_instance.sum()] += 1
    labels, assignments = [], []
    for i in range(n):
        z = gen.choice(len(weights), size=per_instance[i], p=weights)
        labels.append(means[i, z] + scales[z] * gen.standard_normal(per_instance[i]))
        assignments.append(z)
    return labels, means, variances, assignments


def log_marginal_likelihood(residuals, weights, prior):
    """
    ln p(S | w) for one instance with scalar outputs, summing over every label
    assignment. residuals has shape (L, K); the offset μ_k is integrated in
    closed form and the precision λ_k by quadrature.
    """
    L, K = residuals.shape
    shape, rate = 0.5 * prior.nu, 0.5 * float(prior.V[0, 0])

    precision_prior = stats.gamma(shape, scale=1.0 / rate)

    def component_marginal(r):
        n = r.shape[0]
        if n == 0:
            return 0.0
        total, square = float(r.sum()), float(r @ r)

        def integrand(lam):
            log_prior = precision_prior.logpdf(lam)
            if lam <= 0 or log_prior < -700.0:
                return 0.0
            # r ~ N(0, aI + b11ᵀ) with a = 1/λ, b = 1/β
            a, b = 1.0 / lam, 1.0 / prior.beta
            log_det = (n - 1) * math.log(a) + math.log(a + n * b)
            quad = (square - b * total ** 2 / (a + n * b)) / a
            return math.exp(-0.5 * (n * LOG_2PI + log_det + quad) + log_prior)

        return math.log(adaptive_quadrature(integrand, 0.0, math.inf, tol=1e-12).value)

    cache = {}
    totals = []
    for code in range(K ** L):
        z = np.array([(code // K ** j) % K for j in range(L)])
        total = float(np.sum(np.log(weights[z])))
        for k in range(K):
            members = tuple(np.flatnonzero(z == k))
            if (k, members) not in cache:
                cache[(k, members)] = component_marginal(residuals[list(members), k])
            total += cache[(k, members)]
        totals.append(total)
    return float(special.logsumexp(totals))


class AcceptanceValidator:
    def __init__(self, full=False):
        self.full = full
        self.seeds = 10 if full else 3
        self.validation_results = []

    def log_validation(self, check_name, success, message=""):
        """Log validation results"""
        status = "✅ VALID" if success else "❌ INVALID"
        print(f"{status}: {check_name}")
        if message:
            print(f"   {message}")
        self.validation_results.append({
            'check': check_name,
            'success': bool(success),
            'message': message,
            'timestamp': datetime.now().isoformat()
        })

    def validate_elbo_monotonicity(self):
        """Every CAVI+EM step keeps the ELBO within 1e-8 relative of the previous step"""
        try:
            n_labels = 2000 if self.full else 600
            problems = {
                3: ((0.7, 0.2, 0.1), (0.0, 3.0, 6.0)),
                6: (np.arange(6, 0, -1) / 21.0, np.arange(6) * 2.0),
            }
            worst = 0.0
            for K, (weights, offsets) in problems.items():
                for seed in range(self.seeds):
                    labels, means, variances, _ = mixture_problem(seed, weights, offsets, np.full(K, 0.5),
                                                                  n_labels=n_labels)
                    trace = np.array(fit_continuous(labels, means, variances, PriorConfig(),
                                                    FitConfig(max_steps=100, rel_tol=0.0)).trace)
                    worst = min(worst, float(np.min(np.diff(trace) / np.abs(trace[:-1]))))
            success = worst >= -1e-8
            self.log_validation("ELBO monotonicity", success, f"largest relative decrease {-worst:.3e}")
            return success
        except Exception as e:
            self.log_validation("ELBO monotonicity", False, str(e))
            return False

    def validate_weight_recovery(self):
        """Known 3-component mixture, 2000 labels: fitted weights within 0.05"""
        try:
            target = np.array([0.7, 0.2, 0.1])
            errors = []
            for seed in range(self.seeds):
                labels, means, variances, _ = mixture_problem(100 + seed, target, (0.0, 4.0, 8.0), (0.5, 0.5, 0.5))
                result = fit_continuous(labels, means, variances, PriorConfig())
                errors.append(float(np.max(np.abs(result.weights.w - target))))
            success = max(errors) <= 0.05
            self.log_validation("Mixture weight recovery", success,
                                f"max coordinate error {max(errors):.4f} over {self.seeds} seeds")
            return success
        except Exception as e:
            self.log_validation("Mixture weight recovery", False, str(e))
            return False

    def validate_probit(self):
        """Probit class probabilities: normalization, closed form and Monte-Carlo frequencies"""
        try:
            gen = Rng(7).generator
            worst_sum = 0.0
            for _ in range(100 if self.full else 20):
                C = int(gen.integers(2, 6))
                component = ProbitComponent(gen.normal(0.0, 2.0, size=C), gen.uniform(0.2, 3.0, size=C))
                worst_sum = max(worst_sum, abs(probit_class_probabilities(component).sum() - 1.0))

            worst_closed = 0.0
            for _ in range(20):
                mu, sigma = gen.normal(0.0, 2.0, size=2), gen.uniform(0.2, 3.0, size=2)
                p = probit_class_probabilities(ProbitComponent(mu, sigma))
                expected = stats.norm.cdf((mu[1] - mu[0]) / math.sqrt(np.sum(sigma ** 2)))
                worst_closed = max(worst_closed, abs(p[1] - expected))

            n_draws = 10_000_000 if self.full else 1_000_000
            mu, sigma = np.array([1.0, 0.0, -1.0]), np.ones(3)
            counts = np.zeros(3)
            for chunk in range(n_draws // 1_000_000):
                draws = mu + sigma * Rng(8).split(chunk).generator.standard_normal((1_000_000, 3))
                counts += np.bincount(np.argmax(draws, axis=1), minlength=3)
            freq = counts / n_draws
            p = probit_class_probabilities(ProbitComponent(mu, sigma))
            z = np.max(np.abs(p - freq) / np.sqrt(p * (1.0 - p) / n_draws))

            success = worst_sum <= 1e-5 and worst_closed <= 1e-6 and z <= 4.0
            self.log_validation("Probit class probabilities", success,
                                f"sum error {worst_sum:.2e}, closed-form error {worst_closed:.2e}, "
                                f"Monte-Carlo z {z:.2f}")
            return success
        except Exception as e:
            self.log_validation("Probit class probabilities", False, str(e))
            return False

    def validate_elbo_bound(self):
        """The fitted ELBO never exceeds the exact log marginal likelihood"""
        try:
            prior = PriorConfig(beta=1.0, nu=2.0, V=np.eye(1))
            gaps = []
            for seed in range(self.seeds):
                gen = np.random.default_rng(200 + seed)
                means = np.array([[0.0, 1.5]])
                labels = [gen.normal(0.5, 1.0, size=4)]
                result = fit_continuous(labels, means, np.full((1, 2), 1.0), prior, FitConfig(max_steps=50))
                residuals = labels[0][:, None] - means[0][None, :]
                exact = log_marginal_likelihood(residuals, result.weights.w, prior)
                gaps.append(exact - result.trace[-1])
            success = min(gaps) >= -1e-4
            self.log_validation("ELBO lower bound", success, f"smallest gap {min(gaps):.3e}")
            return success
        except Exception as e:
            self.log_validation("ELBO lower bound", False, str(e))
            return False

    def validate_delta_method(self):
        """Delta-method variance against sampling on f(x) = ‖x‖²"""
        try:
            class Quadratic:
                output_dim = 1

                def forward(self, x):
                    return np.sum(np.asarray(x, dtype=float) ** 2, axis=-1, keepdims=True)

                def input_gradient(self, x):
                    return 2.0 * np.asarray(x, dtype=float)[None, :]

            model, x = Quadratic(), np.array([1.0, 0.5])
            noise = NoiseConfig(sigma_eps=1e-12)
            n = 1_000_000 if self.full else 200_000

            def relative_error(sigma, seed):
                spec = AugmentationSpec.gaussian_noise(sigma)
                delta = delta_method_moments(model, x, spec, noise).variance[0]
                sampled = mc_moments(model, x, spec, n, noise, Rng(seed)).variance[0]
                return abs(delta - sampled) / sampled

            at_005 = relative_error(0.05, 1)
            ordered = sum(relative_error(0.01, s) < relative_error(0.5, s) for s in range(self.seeds))
            success = at_005 < 0.1 and ordered == self.seeds
            self.log_validation("Delta-method validity", success,
                                f"relative error {at_005:.4f} at σ=0.05, ordering held in {ordered}/{self.seeds}")
            return success
        except Exception as e:
            self.log_validation("Delta-method validity", False, str(e))
            return False

    def validate_advi(self):
        """ADVI weights agree with CAVI; a conjugate Gaussian posterior is recovered"""
        try:
            labels, means, variances, _ = mixture_problem(300, (0.7, 0.2, 0.1), (0.0, 4.0, 8.0), (0.5, 0.5, 0.5),
                                                          n_labels=2000 if self.full else 600)
            prior = PriorConfig()
            cavi = fit_continuous(labels, means, variances, prior).weights.w
            latents = "all" if self.full else "weights"
            transform, log_joint, init = vbtta_log_joint(labels, means, variances, prior, latents)
            q = advi_fit(log_joint, transform, init, AdamConfig(learning_rate=0.05),
                         n_steps=1500 if self.full else 600, n_mc=2, rng=Rng(9))
            advi = posterior_mean_weights(q, transform, Rng(10)).w
            weight_gap = float(np.max(np.abs(advi - cavi)))

            def conjugate(eta):
                return float(stats.norm(1.0, 0.5).logpdf(eta[0][0]))

            q1 = advi_fit(conjugate, TransformSpec((("identity", 1),)), FullRankGaussian.standard(1),
                          AdamConfig(learning_rate=0.01), n_steps=2000, n_mc=4, rng=Rng(11))
            mean_err, std_err = abs(q1.mean[0] - 1.0), abs(q1.chol[0, 0] - 0.5)

            success = weight_gap <= 0.1 and mean_err <= 0.05 and std_err <= 0.05
            self.log_validation("ADVI cross-check", success,
                                f"weight gap {weight_gap:.4f}, mean error {mean_err:.4f}, std error {std_err:.4f}")
            return success
        except Exception as e:
            self.log_validation("ADVI cross-check", False, str(e))
            return False

    def _benchmark_config(self, name):
        config = load_config(os.path.join(ROOT, "configs", f"{name}.env"), environ={})
        if self.full:
            return config
        return with_overrides(config, dim=10, n_train=1000, n_calibration=300, n_test=300,
                              n_seeds=self.seeds, epochs=200, mc_samples=32,
                              tta_samples=32, steps=100, checkpoints=(1, 100))

    def validate_benchmark_trend(self):
        """Fitted weights beat uniform TTA and improve on their first step"""
        try:
            success = True
            for name in ("gaussian", "gamma"):
                config = self._benchmark_config(name)
                report = run_experiment(config)
                last, first = config.checkpoints[-1], config.checkpoints[0]
                K = config.K
                table = report.metrics.set_index(["strategy", "step"])["mean"]
                uniform = table[(f"{K}-TTA", last)]
                fitted = table[(f"{K}-VB-TTA", last)]
                per_seed = report.per_seed[report.per_seed["strategy"] == f"{K}-VB-TTA"]
                by_step = per_seed.pivot(index="seed", columns="step", values="value")
                improved = int((by_step[last] <= by_step[first]).sum())
                ok = fitted <= 0.5 * uniform and improved == config.n_seeds
                self.log_validation(f"Benchmark trend ({name})", ok,
                                    f"{K}-VB-TTA {fitted:.4f} vs {K}-TTA {uniform:.4f}; "
                                    f"improved in {improved}/{config.n_seeds} seeds")
                success = success and ok
            return success
        except Exception as e:
            self.log_validation("Benchmark trend", False, str(e))
            return False

    def validate_gaussianity(self):
        """Mixup samples are further from Gaussian at a tail point than at the pool mean"""
        try:
            wins = 0
            for seed in range(self.seeds):
                frame, _ = gaussianity_study("gaussian", 0.5, (0.0, 3.0), 10_000, Rng(seed))
                mixup = frame[frame["augmentation"] == "mixup(0.5)"].set_index("distance")["skewness"]
                wins += int(mixup[3.0] > mixup[0.0])
            needed = math.ceil(0.8 * self.seeds)
            success = wins >= needed
            self.log_validation("Gaussianity study", success, f"tail statistic larger in {wins}/{self.seeds} seeds")
            return success
        except Exception as e:
            self.log_validation("Gaussianity study", False, str(e))
            return False

    def validate_determinism(self):
        """Two runs with the same seed write byte-identical CSVs"""
        try:
            config = load_config(os.path.join(ROOT, "configs", "gaussian.env" if self.full else "smoke.env"),
                                 environ={})
            contents = []
            with tempfile.TemporaryDirectory() as tmp:
                for attempt in range(2):
                    directory = os.path.join(tmp, str(attempt))
                    emit_report(run_experiment(config), directory)
                    contents.append([open(os.path.join(directory, name), "rb").read()
                                     for name in ("metrics.csv", "weights.csv", "elbo.csv")])
            success = contents[0] == contents[1]
            self.log_validation("Determinism", success)
            return success
        except Exception as e:
            self.log_validation("Determinism", False, str(e))
            return False

    def run_validation(self, only=None):
        """Run all acceptance validations"""
        print(f"🔍 Starting acceptance validation ({'full' if self.full else 'reduced'} scale)")
        print("=" * 60)

        validations = {
            "monotonicity": self.validate_elbo_monotonicity,
            "recovery": self.validate_weight_recovery,
            "probit": self.validate_probit,
            "bound": self.validate_elbo_bound,
            "delta": self.validate_delta_method,
            "advi": self.validate_advi,
            "benchmark": self.validate_benchmark_trend,
            "gaussianity": self.validate_gaussianity,
            "determinism": self.validate_determinism,
        }
        selected = [validations[name] for name in (only or validations)]

        passed = 0
        total = len(selected)

        for validation in selected:
            if validation():
                passed += 1

        print("\n" + "=" * 60)
        print(f"📊 Validation Results: {passed}/{total} checks passed")

        if passed == total:
            print("🎉 Acceptance validation successful! All checks passed.")
        else:
            print(f"⚠️  {total - passed} validations failed.")

        return passed == total


@click.command()
@click.option("--full", is_flag=True, help="run at the stated sizes and seed counts")
@click.option("--only", multiple=True,
              type=click.Choice(["monotonicity", "recovery", "probit", "bound", "delta", "advi",
                                 "benchmark", "gaussianity", "determinism"]))
@click.option("--results", default=RESULTS_FILE, help="where to write the JSON results")
def main(full, only, results):
    """Main validation execution"""
    logging.basicConfig(level=os.getenv("LOG_LEVEL", "WARNING").upper())
    try:
        validator = AcceptanceValidator(full=full)
        success = validator.run_validation(only=list(only) or None)

        with open(results, 'w') as f:
            json.dump({
                'timestamp': datetime.now().isoformat(),
                'scale': 'full' if full else 'reduced',
                'total_checks': len(validator.validation_results),
                'passed_checks': sum(1 for r in validator.validation_results if r['success']),
                'results': validator.validation_results
            }, f, indent=2)

        print(f"\n📄 Detailed results saved to {results}")

        return 0 if success else 1

    except Exception as e:
        print(f"❌ Validation failed with error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main(standalone_mode=False))
