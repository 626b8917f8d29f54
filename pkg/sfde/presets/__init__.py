# Makes 'presets' a Python package
