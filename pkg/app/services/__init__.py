# Numerical Services Package
