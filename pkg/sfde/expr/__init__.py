# Makes 'expr' a Python package
