# Makes 'utils' a Python package
