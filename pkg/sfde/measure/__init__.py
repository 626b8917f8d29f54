# Makes 'measure' a Python package
