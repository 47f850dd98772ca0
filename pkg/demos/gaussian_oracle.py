"""Compare DPS and CDPS against the exact posterior of a Gaussian field.

An 8 x 8 Gaussian random field is observed on 16 cells with noise std 0.2.
Because the prior score is analytic, the exact posterior is available and
both samplers can be scored against it.

Run with ``python demos/gaussian_oracle.py``.
"""

import numpy as np

from cdps.denoiser import CalibrationTable, default_sigma_grid
from cdps.forward import MaskOperator, NoiseModel
from cdps.geostat import VariogramModel
from cdps.priors import GaussianPrior, linear_gaussian_posterior
from cdps.rng import stream
from cdps.samplers import LikelihoodTerm, SamplerConfig, run_sampler

SIDE = 8
SIGMA_D = 0.2
N_SAMPLES = 500


def build_prior() -> GaussianPrior:
    ii, jj = np.meshgrid(np.arange(SIDE), np.arange(SIDE), indexing="ij")
    x, y = jj.ravel(), ii.ravel()
    cov = VariogramModel("exponential", 2.0, 2.0, 1.0).covariance(x[:, None] - x[None], y[:, None] - y[None])
    return GaussianPrior(np.ones(SIDE * SIDE), cov, (1, SIDE, SIDE))


def main() -> None:
    prior = build_prior()
    rng = stream(100)
    truth = prior.sample(rng, 1)[0]
    op = MaskOperator([(0, r, c) for r in (1, 3, 5, 7) for c in (1, 3, 5, 7)], (1, SIDE, SIDE))
    d = op.forward(truth[None])[0] + SIGMA_D * rng.standard_normal(op.n_data)
    term = LikelihoodTerm(op, d, NoiseModel(SIGMA_D))

    post = linear_gaussian_posterior(prior, op.matrix(), d, SIGMA_D**2)
    post_std = np.sqrt(np.diag(post.dense_cov()))

    # The analytic denoiser error is the calibration CDPS needs.
    sig = default_sigma_grid()
    calib = CalibrationTable(sig, np.array([prior.denoiser_error_rms(s) for s in sig]))

    print(f"{'method':<6} {'steps':>5} {'mean rel err':>13} {'std ratio min':>14} {'std ratio max':>14}")
    for method, steps in (("dps", 32), ("dps", 250), ("cdps", 32)):
        res = run_sampler(prior, SamplerConfig("edm", method, steps), N_SAMPLES, [term], calib)
        X = res.samples[~res.diverged].reshape(-1, SIDE * SIDE)
        err = np.linalg.norm(X.mean(axis=0) - post.mean) / np.linalg.norm(post.mean)
        ratio = X.std(axis=0) / post_std
        print(f"{method:<6} {steps:>5} {err:>13.4f} {ratio.min():>14.3f} {ratio.max():>14.3f}")


if __name__ == "__main__":
    main()
