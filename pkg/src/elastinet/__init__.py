"""Elastic supernets for on-device latency adaptation, at toy scale."""
from .graph import (
    ChainSpec,
    GranularityError,
    LayerSpec,
    SubnetEncoding,
    SupernetGraph,
    count_subnets,
    elasticize,
    enumerate_subnets,
    expand_graph,
    partition_blocks,
    sample_uniform_subnet,
    validate_subnet,
)
from .latsim import LatencyTable, make_env, profile_blocks, subnet_latency
from .search import SearchConfig, evolutionary_search, exhaustive_oracle

__version__ = "0.1.0"
