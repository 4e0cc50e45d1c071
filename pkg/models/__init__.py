# Typed records, errors and the run ledger
