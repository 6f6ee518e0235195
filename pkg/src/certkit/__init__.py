"""Learn certificate functions from trajectories and check them statistically and globally."""

from .datagen import Dataset, SampleRegion, generate_pairs, generate_trajectories, load_dataset, save_dataset
from .dynamics import SystemSpec, Trajectory, integrate, make_builtin, prolongate
from .estimators import DiscreteLyapunovLearner, LyapunovLearner, MetricLearner
from .models import (FactoredMetric, NeuralLyapunov, PolynomialMetric, QuadraticLyapunov,
                     RandomFeatureCertificate, load_model, save_model)
from .statbounds import chernoff_ucb, empirical_violation, rcp_epsilon
from .training import TrainConfig, train

__version__ = "0.1.0"
