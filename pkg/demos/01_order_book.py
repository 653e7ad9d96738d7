"""
Matching orders by price and time
=================================

A tour of the limit order book on its own, without accounts or agents.
Prices are integer ticks of one cent and quantities are shares in lots of 100.
"""

from cdasim.lob import Kind, Order, OrderBook, Side

book = OrderBook(lot_size=100)

# Two sellers queue at 100.01; the first one in line is filled first.
book.submit(Order(1, "alice", Side.ASK, Kind.LIMIT, 10_001, 300))
book.submit(Order(2, "bob", Side.ASK, Kind.LIMIT, 10_001, 400))
book.submit(Order(3, "carol", Side.ASK, Kind.LIMIT, 10_002, 500))
book.submit(Order(4, "dave", Side.BID, Kind.LIMIT, 9_999, 1_000))
print(book.snapshot())

# A market buy for 9 lots sweeps alice, then bob, then part of carol's level.
for t in book.submit(Order(5, "erin", Side.BID, Kind.MARKET, None, 900)):
    print(f"{t.taker_agent} bought {t.quantity} from {t.maker_agent} at {t.price / 100:.2f}")

# A limit order that crosses trades first and rests what is left.
book.submit(Order(6, "frank", Side.BID, Kind.LIMIT, 10_003, 500))
print("best bid", book.best_bid, "best ask", book.best_ask)

# Cancelling is lazy under the hood but invisible from outside.
book.cancel(6)
book.check_invariants()
print(book.depth(Side.BID), book.depth(Side.ASK))
