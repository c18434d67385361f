"""Equilibrium strategies for time-inconsistent mean-field control with common noise."""
from .equilibrium import (AffinePerturbation, FeedbackStrategy, MeasureMoments, equilibrium_map, feedback,
                          g_functional, gamma, gamma_quadratic, master_residual, value)
from .errors import (ConditionsViolated, DomainViolation, IllConditioned, ModelError, NotConverged,
                     SimulationDiverged)
from .mckv_sim import (CostSpec, InitLaw, ParticleEnsemble, StrategySpec, estimate_cost, estimate_cost_difference,
                       simulate, spike)
from .model import (DiscountFn, LQModel, TerminalFn, TimeFn, TwoTimeFn, check_monotonicity, check_pd_conditions,
                    eval_two_time, load_model, save_model)
from .riccati import (RiccatiSolution, TriangularGrid, residual, solve_fixed_point, solve_partition,
                      solve_systemic_risk, uwszy)
from .verifier import DeltaReport, equilibrium_certificate, estimate_delta

__version__ = "0.1.0"
