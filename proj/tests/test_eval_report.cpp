#include <doctest.h>

#include "clf/eval_report.hpp"

using namespace clf;

TEST_CASE("average accuracy") {
    AccuracyMatrix m(2);
    m.set(0, 0, 0.9);
    CHECK(avg_accuracy(m, 1) == doctest::Approx(0.9));
    CHECK_THROWS_AS(avg_accuracy(m, 2), ContractError);
    m.set(1, 0, 0.6);
    CHECK_THROWS_AS(avg_accuracy(m, 2), ContractError);
    m.set(1, 1, 0.4);
    CHECK(avg_accuracy(m, 2) == doctest::Approx(0.5));
    CHECK_THROWS_AS(m.set(0, 1, 0.5), ContractError);
    CHECK_THROWS_AS(m.set(1, 1, 1.5), ContractError);
}

TEST_CASE("average forgetting") {
    AccuracyMatrix m(3);
    m.set(0, 0, 0.60);
    CHECK(avg_forgetting(m, 1) == 0.0);
    m.set(1, 0, 0.40);
    m.set(1, 1, 0.70);
    CHECK(avg_forgetting(m, 2) == doctest::Approx(20.0));
    CHECK(format_fixed2(avg_forgetting(m, 2)) == "20.00");
    CHECK(avg_forgetting(m, 2, true) == doctest::Approx(10.0));

    m.set(2, 0, 0.70);  // backward transfer
    m.set(2, 1, 0.70);
    m.set(2, 2, 0.50);
    CHECK(avg_forgetting(m, 3) == doctest::Approx(-5.0));

    AccuracyMatrix none(2);
    none.set(0, 0, 0.8);
    none.set(1, 0, 0.8);
    none.set(1, 1, 0.3);
    CHECK(avg_forgetting(none, 2) == 0.0);

    AccuracyMatrix partial(2);
    partial.set(0, 0, 0.5);
    partial.set(1, 1, 0.5);
    CHECK_THROWS_AS(avg_forgetting(partial, 2), ContractError);
}

TEST_CASE("result formatting rounds half away from zero") {
    CHECK(format_result(0.2130, 26.90) == "21.30 (26.90)");
    CHECK(format_fixed2(1.005) == "1.01");
    CHECK(format_fixed2(2.675) == "2.68");
    CHECK(format_fixed2(-1.005) == "-1.01");
    CHECK(format_fixed2(-0.004) == "0.00");
    CHECK(format_fixed2(0.0) == "0.00");
    CHECK(format_fixed2(12.344999) == "12.34");
    CHECK(format_fixed2(100.0) == "100.00");
    CHECK_THROWS_AS(format_fixed2(std::nan("")), ContractError);
}

TEST_CASE("storage ledger") {
    LedgerInput in;
    in.M = 1000;
    auto e = storage_ledger("ewc", in);
    CHECK(e.bytes == 2000);
    CHECK(e.formula == "2 · M");

    LedgerInput imm;
    imm.T = 3;
    imm.M = 10;
    e = storage_ledger("mean-imm", imm);
    CHECK(e.bytes == 30);
    CHECK(e.formula == "T · M");
    CHECK(storage_ledger("mode-imm", imm).bytes == 60);

    LedgerInput gem;
    gem.T = 2;
    gem.M = 10;
    gem.R = 5;
    CHECK(storage_ledger("gem", gem).bytes == 25);
    CHECK(storage_ledger("gem", gem).formula == "T · M + R");

    LedgerInput all{4, 100, 50, 7, 3, 2};
    CHECK(storage_ledger("lwf", all).bytes == 100);
    CHECK(storage_ledger("ebll", all).bytes == 128);
    CHECK(storage_ledger("si", all).bytes == 300);
    CHECK(storage_ledger("mas", all).bytes == 200);
    CHECK(storage_ledger("packnet", all).bytes == 8);
    CHECK(storage_ledger("hat", all).bytes == 12);
    CHECK(storage_ledger("icarl", all).bytes == 150);
    CHECK(ledger_methods().size() == 11);
    for (const auto& id : ledger_methods()) CHECK_NOTHROW(storage_ledger(id, all));
    CHECK_THROWS_AS(storage_ledger("finetune", all), ContractError);
    LedgerInput bad;
    bad.M = -1;
    CHECK_THROWS_AS(storage_ledger("ewc", bad), ContractError);
    CHECK(ledger_csv("ewc", in).find("\"2 · M\",2000") != std::string::npos);
}

TEST_CASE("capacity series") {
    CapacityReport r1{{"trunk.0.W"}, {0.27}};
    auto s = capacity_series({r1});
    CHECK(s.used.size() == 1);
    CHECK(s.used[0] == std::vector<double>{0.27});
    CHECK_FALSE(s.saturated);

    CapacityReport r2{{"trunk.0.W"}, {0.96}};
    s = capacity_series({r1, r2});
    CHECK(s.saturated);
    CHECK(capacity_csv(s) == "layer,task_1,task_2\ntrunk.0.W,0.27,0.96\n");

    CHECK_THROWS_AS(capacity_series({r2, r1}), ContractError);
    CapacityReport other{{"trunk.1.W"}, {0.5}};
    CHECK_THROWS_AS(capacity_series({r1, other}), ContractError);
    CHECK_THROWS_AS(capacity_series({}), ContractError);
}

TEST_CASE("results csv round trip") {
    AccuracyMatrix m(3);
    m.set(0, 0, 0.1 + 0.2);
    m.set(1, 0, 1.0 / 3.0);
    m.set(1, 1, 0.75);
    const std::string text = results_csv(m);
    CHECK(text.rfind("after_task,task_1,task_2,task_3\n", 0) == 0);
    const AccuracyMatrix back = parse_results_csv(text);
    CHECK(back == m);
    CHECK(back.rows_complete() == 2);

    ByteWriter w;
    m.save(w);
    ByteReader r(w.buffer());
    CHECK(AccuracyMatrix::load(r) == m);
}

TEST_CASE("summary and attempts csv") {
    const auto s = summary_csv({{"ewc", "base", 0.5, 20.0}});
    CHECK(s == "method,model,avg_acc,avg_forgetting,report\newc,base,50.00,20.00,\"50.00 (20.00)\"\n");
    const auto a = attempts_csv({{1, "search", "lr=0.01", 0.5, "best"}});
    CHECK(a == "task,phase,setting,val_acc,decision\n1,search,\"lr=0.01\",0.5,best\n");
}
