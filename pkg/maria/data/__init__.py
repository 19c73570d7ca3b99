# Data-io package: tokenizer, corpus shards, checkpoints, reports
