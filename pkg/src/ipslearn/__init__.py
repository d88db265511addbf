"""Learning interaction and confining potentials from unlabeled snapshots."""

from .models import (PotentialSpec, potential_value, potential_grad,
                     potential_laplacian, radial_profile, spec_from_name,
                     reference_spec, smoothness_spec, conditioning_spec,
                     singularity_spec, smooth_control_spec, anisotropic_spec)
from .simulate import (SimConfig, SnapshotDataset, simulate, strip_labels,
                       write_dataset, read_dataset, read_header)
from .basis import BasisSet, oracle_basis, rbf_basis, percentile_rmax
from .selftest import (RegressionVectors, NormalSystem, FitResult,
                       regression_vectors, assemble, loss_quadratic, loss_direct,
                       tikhonov_solve, lcurve_select, fit_selftest_lse,
                       martingale_mean_check)
from .baselines import Coupling, labeled_mle, sinkhorn, coupling_to_assignment, sinkhorn_mle
from .nn import (MlpPotential, TrainConfig, make_mlp, mlp_value_grad_laplacian,
                 selftest_nn_loss, train, save_checkpoint, load_checkpoint)
from .evaluate import (DensityGrid, ErrorReport, kde, radial_densities,
                       relative_gradient_error, vector_gradient_error,
                       block_evaluation, condition_diagnostics, empirical_gram)

__version__ = "0.1.0"
