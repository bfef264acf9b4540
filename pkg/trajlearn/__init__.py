from .dataset import Dataset, DatasetMeta, TrajectoryRecord, WeakRecord
from .sme import PhysicalModel, generate_dataset, generate_trajectory, solve_master_equation
from .sdelearn import distill, evaluate_ce, fit_spam, model_select, train_sde
from .rnn import GruModel, train_rnn
from .characterize import bin_fit, coarse_study, mse_vs_truth, self_consistency
from .dataio import load_dataset, save_dataset
