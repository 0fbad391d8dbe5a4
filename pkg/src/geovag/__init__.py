"""Two-phase geothermal flow in fractured porous media.

Finite-volume simulator on conforming polyhedral meshes with cell, node and
fracture-face unknowns, coupled to multi-branch well models and solved fully
implicitly with a semismooth (Newton-min) active-set method.
"""

from .thermo import (
    DofState,
    EosCoefficients,
    FlashError,
    FlashResult,
    FluidEOS,
    PhaseContext,
    PropertyRangeError,
    closure_residuals,
    flash_p_qm_qe,
    rel_perm,
    rel_perm_d,
)
from .mesh import (
    DfmMesh,
    MeshFormatError,
    MeshValidationError,
    WellGeometry,
    WellTreeError,
    build_cartesian_mesh,
    build_well,
    load_dfm_mesh,
    write_dfm_mesh,
)
from .vag import (
    VagDiscretization,
    VolumeDistribution,
    distribute_volumes,
)
from .wells import (
    Well,
    WellTrace,
    injection_pressure_drop,
    peaceman_index,
    production_pressure_drop,
)
from .assembly import (
    Assembler,
    ReservoirState,
    make_uniform_state,
    sync_secondary,
)
from .solver import (
    EliminationError,
    LinearSolveError,
    SimulationAbort,
    SolverConfig,
    SolverError,
    StepRecord,
    TimeLoopResult,
    newton_solve,
    time_loop,
)
from .io import (
    ConfigError,
    ScenarioConfig,
    StageSpec,
    WellSpec,
    builtin_case41,
    load_scenario,
    run_scenario,
    save_scenario,
)

__version__ = "0.1.0"
