"""EMBANet building blocks, network builder, profiler and desk-scale training."""
