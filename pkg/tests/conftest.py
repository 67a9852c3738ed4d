import warnings

# numba emits a TBB-version warning on import in some environments;
# it is harmless (a different threading layer is used) and noisy
warnings.filterwarnings("ignore", message=".*TBB.*")
