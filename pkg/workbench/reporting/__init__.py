"""CSV and TOML exports of traces, campaigns and size tiers."""

from workbench.reporting.campaign_report import (
    export_campaign,
    read_sizes,
    read_tiers,
    write_sizes,
    write_tiers,
)
from workbench.reporting.trace_export import (
    TraceExportError,
    export_probability_ranks,
    export_trace,
)

__all__ = [
    "TraceExportError",
    "export_campaign",
    "export_probability_ranks",
    "export_trace",
    "read_sizes",
    "read_tiers",
    "write_sizes",
    "write_tiers",
]
