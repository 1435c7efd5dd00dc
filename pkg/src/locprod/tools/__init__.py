"""
Kernel weights, residual models and weighted solvers
"""
