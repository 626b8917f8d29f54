# Makes 'resolvent' a Python package
