# Makes 'spectral' a Python package
