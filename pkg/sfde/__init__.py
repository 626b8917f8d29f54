# Makes 'sfde' a Python package
