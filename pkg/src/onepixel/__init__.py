"""Black-box one-pixel attacks on image classifiers via differential evolution."""

from .attack import (
    AttackConfig,
    AttackDirection,
    AttackError,
    AttackRecord,
    Outcome,
    classify_outcome,
    run_attack,
)
from .campaign import (
    ColorHistogram,
    DatasetEntry,
    Label,
    SummaryStats,
    build_report,
    color_histogram,
    emit_plots,
    filter_dataset,
    load_manifest,
    read_results,
    run_campaign,
    summarize,
)
from .evolution import (
    Bounds,
    ConfigError,
    DeConfig,
    DeRunResult,
    best1bin_trial,
    check_convergence,
    de_minimize,
    lhs_init,
)
from .imaging import (
    BoundsError,
    PixelPerturbation,
    RgbImage,
    apply_perturbation,
    decode_png,
    encode_png,
)
from .oracle import (
    CachedOracle,
    ConstantOracle,
    DarknessOracle,
    HttpOracle,
    OracleError,
    PlantedOracle,
    cached,
    http_score,
    parse_oracle_spec,
    planted_oracle,
)

__version__ = "0.1.0"
