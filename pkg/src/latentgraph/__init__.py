"""Latent covariance structure of multivariate GLMMs with elliptical random components."""

from .covest import (BlockPartition, PredictionSet, conditional_scatter, covariance_from_predictions,
                     elliptical_approx_ml, gauss_hermite_rule, gaussian_approx_ml,
                     predict_random_components, sample_covariance)
from .dispersion import MarginSpec, MglmmSpec, LongDataset, simulate_mglmm
from .elliptical import EllipticalSpec, SpecError, density_elliptical, sample_elliptical, theoretical_kappa
from .graphs import MixedGraph, build_bcg, build_ug, export_dot, induced_separation, moralize, separates
from .gtests import (TestResult, beta_product_params, elliptical_test, estimate_kappa, gaussian_exact_test,
                     ks_uniform_test, pairwise_edge_tests, v_density_tang, v_pvalue_exact, v_statistic)

__version__ = "0.1.0"


def data_file(name):
    """Path of a bundled example configuration, e.g. ``data_file("size_t5.json")``."""
    from importlib.resources import files
    return str(files(__name__) / "data" / name)
