"""Actigraph timesheet: ingestion, alignment, scaling and imputation."""

from .geo import EARTH_RADIUS_M, haversine, interpolate_geo, radial_average
from .impute import ImputedCovariates, OutcomeImputation, impute_covariates, impute_outcomes
from .preprocess import (HORIZON, EpochObs, PreprocessRules, RawRecord, Trajectory, epoch_average_mag, mag,
                         preprocess_trajectories)
from .sheet import Scaler, Timesheet, build_timesheet, read_bundle, scale_covariates, write_bundle
