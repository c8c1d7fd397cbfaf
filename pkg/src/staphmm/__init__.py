"""Bayesian segmentation of multi-animal movement tracks.

Sticky HDP-HMMs whose behaviors draw their movement parameters from five
coupled Dirichlet processes, so behaviors within and across animals can
share any subset of parameters.  Emissions follow the STAP conditional law
(a biased-and-correlated random walk).  The package bundles the blocked
Gibbs sampler, posterior summaries and model-comparison criteria, and a
small CLI (``staphmm fit|simulate|summarize|compare``).
"""

from .stap import (
    StapParams,
    ZeroDisplacementError,
    bearing_angle,
    rotation_matrix,
    stap_conditional_moments,
    stap_logpdf,
    stap_sample,
    wrap_angle,
)
from .base_measure import (
    FAMILIES,
    AtomTable,
    BaseMeasureMode,
    LabelSpace,
    PriorConfig,
    apply_mode,
    composite_atoms,
    composite_weight,
    dirichlet_weights,
    draw_atom,
    stick_breaking_weights,
)

__version__ = "0.1.0"
