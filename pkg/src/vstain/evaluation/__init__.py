from .intensity import (
    AggregateRow,
    DomainShift,
    IntensityDiff,
    IntensitySummary,
    Stat,
    aggregate,
    domain_shift_summary,
    intensity_difference,
    masked_intensity,
    mean_sd,
)
from .metrics import PSNR_INF, SsimParams, mse, pcc, psnr, psnr_from_mse, ssim
from .pair import COMPARISONS, METRIC_COMPARISONS, MetricRecord, evaluate_pair, pad_to_common
from .stats import StatTestResult, anova_oneway, betainc, f_sf, fisher_lsd, t_quantile_two_sided
