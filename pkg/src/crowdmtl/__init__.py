"""Multi-task learning on crowd and expert affect annotations.

The package covers the full pipeline: trace ingestion and quality control,
median fusion and concordance statistics, stacked design assembly,
proximal-gradient solvers for seven sparse multi-task formulations, and
the snippet-regression / transfer-classification experiment protocols.
"""

from .annotations import (
    AnnotationTrace,
    ConcordanceReport,
    QcPolicy,
    QcVerdict,
    concordance,
    kendalls_w,
    load_traces,
    median_fuse,
    pearson,
    quality_filter,
    resample_trace,
    window_last,
)
from .design import (
    StackedDesign,
    TaskDataset,
    TaskGraph,
    assemble_design,
    build_incidence,
    build_label_indicator,
    build_reliability,
    discretize_levels,
    level_midpoints,
    reliability_from_median,
    stack_tasks,
)
from .errors import CrowdMtlError, DataError, NumericalError
from .experiments import (
    P1Config,
    P1Data,
    P2Config,
    P2Data,
    ResultRow,
    ResultTable,
    SynthConfig,
    accuracy,
    crossval_lambda1,
    extract_snippets,
    rmse,
    run_p1,
    run_p2,
    substream,
    synth_generate,
    synth_generate_p2,
)
from .prox import prox_l1, prox_l21_rows, prox_linf_rows
from .solvers import (
    CompositeProblem,
    FitResult,
    ModelSpec,
    SolverConfig,
    build_problem,
    fista_solve,
    fit,
    grad_smooth_egmtl,
    objective_egmtl,
    predict,
    predict_transfer,
)

__version__ = "0.1.0"
