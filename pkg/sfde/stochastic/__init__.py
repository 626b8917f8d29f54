# Makes 'stochastic' a Python package
