from .config import ExperimentConfig, desk_config
from .pipeline import (RunManifest, compare_runs, render_grid, run_ablation, run_pipeline,
                       summary_table)

__all__ = ["ExperimentConfig", "RunManifest", "compare_runs", "desk_config", "render_grid",
           "run_ablation", "run_pipeline", "summary_table"]
