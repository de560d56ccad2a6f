"""Command-line orchestration: configs, run directories, teacher training and ablation grids."""
