from .core import (AggregationError, ClientUpdate, ConfigError, LocalContext, PersonalState,
                   RoundConfig, RoundMetrics, client_generator, sample_clients, weighted_aggregate)
from .loop import (ClientFailure, ClientRunner, ClientSSLOpt, FederatedServer, TrainingResult,
                   metrics_lines, read_metrics, run_training, write_metrics)
