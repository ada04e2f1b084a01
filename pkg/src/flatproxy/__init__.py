"""DPU-style service mesh data plane, control plane, and simulator."""

from .core import (
    Endpoint,
    FlowKey,
    Metadata,
    Proto,
    ProtoType,
    TrafficUnit,
    UnitKind,
    Verdict,
    make_conn_key,
    make_listener_key,
)
from .match_action import ChainSpec, MatchTable, Ppm, compile_chain, publish_rules
from .slow_path import MeshConfig, MeshRuntime, load_config
from .sim import Mode, Workload, builtin_cost_models, compare_modes, run_sim

__version__ = "0.1.0"
