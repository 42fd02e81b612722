# Integration tests directory