# Affect trace test suite
