# 评估: 困惑度、吞吐、生成困惑度、ELO、表示探针
