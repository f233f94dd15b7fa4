"""liftdig: lifted linear identification and contouring control for
planar bucket-soil excavation.

Pipeline: generate terrains -> collect PID-excited trajectories on the
truth simulator -> regress lifted linear models -> score multi-horizon
prediction error -> dig desired paths closed loop with a contouring MPC
solved as a convex QP.
"""

from .model import (AuxVars, BucketState, ContinuousDflModel, ControlInput,
                    DiscreteLiftedModel, SoilLocal, StateBounds, XI_DIM,
                    XI_NAMES, discretize, discretize_matrices, lift,
                    load_model, rollout, save_model, split, step)
from .terrain import (HeightField, SurfaceSpline, TerrainGenParams, eval_soil,
                      excavate, fit_spline, load_terrain, random_terrain,
                      save_terrain)
from .simulator import (SimParams, SimState, SimulationDiverged, advance,
                        measure, sim_step, soil_reaction, spawn)
from .datagen import (Dataset, Episode, ExcitationConfig, collect,
                      load_dataset, pid_excite, save_dataset)
from .sysid import (InsufficientDataError, Lifting, MseTable, compute_bounds,
                    dfl_structured_fit, eval_prediction_mse, poly_observables,
                    regress_lifted, spectral_radius, split_dataset)
from .qp import QpSolution, QuadProgram, SolverSettings, kkt_residuals, solve
from .mpcc import (ContourPath, MpccConfig, MpccController, build_qp,
                   contouring_errors, linearize_errors, linearize_soil,
                   path_from_waypoints, run_dig)

__version__ = "0.1.0"
