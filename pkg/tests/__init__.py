# aepo-desk tests
