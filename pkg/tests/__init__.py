# dipwell test suite
