from ._core import (
    ConfigError,
    DriveCycle,
    Env,
    InfeasibleError,
    NumericError,
    PowertrainModel,
    ShevError,
    build_model,
    compare,
    delta_percent,
    dp,
    dp_solve,
    evaluate,
    help_config,
    mpg,
    repeat_cycle,
    resolve_cycle,
    reward,
    soc_shaping,
    study_arms,
    total_percent,
    train,
)

__all__ = [n for n in dir() if not n.startswith("_")]
