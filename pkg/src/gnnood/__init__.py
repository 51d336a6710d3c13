"""Graph neural networks under distribution shift: kernels, models, training strategies and evaluation."""

from .errors import (ConfigError, DataError, GnnOodError, NumericalError, ParseError, ProtocolError,
                     ShapeError, UsageError)
from .evaluation import MetricsReport, RunResult, accuracy, gap, paired_t_test, significance_color
from .graph import (GeneratorConfig, Graph, SplitMasks, gen_concept_shift, gen_covariate_shift, graph_from_edges,
                    load_graph, normalize_adjacency, save_graph)
from .models import ModelSpec, forward, init_params
from .strategies import TrainPlan, train

__version__ = "0.1.0"
