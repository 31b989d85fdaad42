# Marker file to make `Source` a Python package.
